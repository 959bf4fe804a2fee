#pragma once

#include <iosfwd>
#include <string>

#include "attnkit/nn.hpp"

namespace attnkit {

// Tensor-registry binary format:
//
//   tensors <count>\n
//   <name> <n> <c> <h> <w>\n      (one line per tensor, registry order)
//   <payload>
//
// The payload is every tensor's values concatenated in manifest order as
// little-endian IEEE-754 float64. Round-trips are bit-exact.

void save_registry(std::ostream& os, const ParamRegistry& reg);
void save_registry_file(const std::string& path, const ParamRegistry& reg);

// Loads values into the existing tensors of `reg`. The manifest must match
// the registry name-for-name, in order, with identical shapes.
void load_registry(std::istream& is, ParamRegistry& reg);
void load_registry_file(const std::string& path, ParamRegistry& reg);

// Little-endian float64 helpers shared by the checkpoint code.
void put_f64_le(std::ostream& os, double v);
double get_f64_le(std::istream& is);

}  // namespace attnkit
