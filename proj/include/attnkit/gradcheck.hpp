#pragma once

#include <functional>
#include <string>
#include <vector>

#include "attnkit/tensor.hpp"

namespace attnkit {

enum class CheckScope { ops, attention, end2end, all };

CheckScope check_scope_from_string(const std::string& s);

struct CheckResult {
    std::string name;
    int instances = 0;
    Scalar max_rel_err = 0;
    Scalar tolerance = 0;
    bool pass = false;
};

// Compares tape gradients of every tensor in `params` against central
// finite differences of the scalar loss (step 1e-5). Relative error uses
// max(|a|,|b|,1) as the denominator. The loss closure must rebuild the
// computation from current values on every call.
Scalar max_rel_err(const std::function<Tensor4()>& loss_fn, const std::vector<Tensor4*>& params,
                   Scalar step = 1e-5);

// Runs the finite-difference suites. `instances` seeded random cases per
// entry; ops and modules check at 1e-4, the end-to-end net at 1e-3.
std::vector<CheckResult> run_gradcheck(CheckScope scope, int instances, std::uint64_t seed);

// Every differentiable operation the ops scope covers.
std::vector<std::string> registered_ops();

std::string gradcheck_report(const std::vector<CheckResult>& results);
bool all_passed(const std::vector<CheckResult>& results);

}  // namespace attnkit
