#include "attnkit/serialize.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace attnkit {

void put_f64_le(std::ostream& os, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    os.write(bytes, 8);
}

double get_f64_le(std::istream& is) {
    char bytes[8];
    is.read(bytes, 8);
    if (is.gcount() != 8) {
        throw FormatError("registry payload truncated");
    }
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

void save_registry(std::ostream& os, const ParamRegistry& reg) {
    os << "tensors " << reg.entries().size() << "\n";
    for (const auto& e : reg.entries()) {
        const Shape4 s = e.tensor.shape();
        os << e.name << " " << s.n << " " << s.c << " " << s.h << " " << s.w << "\n";
    }
    for (const auto& e : reg.entries()) {
        for (double v : e.tensor.values()) put_f64_le(os, v);
    }
}

void load_registry(std::istream& is, ParamRegistry& reg) {
    std::string tag;
    std::size_t count = 0;
    if (!(is >> tag >> count) || tag != "tensors") {
        throw FormatError("registry: missing 'tensors' manifest header");
    }
    if (count != reg.entries().size()) {
        throw FormatError("registry: manifest lists " + std::to_string(count) +
                          " tensors, expected " + std::to_string(reg.entries().size()));
    }
    for (const auto& e : reg.entries()) {
        std::string name;
        Shape4 s;
        if (!(is >> name >> s.n >> s.c >> s.h >> s.w)) {
            throw FormatError("registry: truncated manifest");
        }
        if (name != e.name) {
            throw FormatError("registry: manifest entry '" + name + "' does not match '" +
                              e.name + "'");
        }
        if (!(s == e.tensor.shape())) {
            throw FormatError("registry: shape mismatch for '" + name + "': file has " +
                              to_string(s) + ", model has " + to_string(e.tensor.shape()));
        }
    }
    is.get();  // newline terminating the manifest
    for (auto& e : reg.mutable_entries()) {
        auto vals = e.tensor.mutable_values();
        for (auto& v : vals) v = get_f64_le(is);
    }
}

void save_registry_file(const std::string& path, const ParamRegistry& reg) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    save_registry(os, reg);
    if (!os) throw IoError("write failed for '" + path + "'");
}

void load_registry_file(const std::string& path, ParamRegistry& reg) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");
    load_registry(is, reg);
}

}  // namespace attnkit
