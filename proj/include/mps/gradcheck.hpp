#pragma once

#include "mps/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mps {

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::size_t worst_coord = 0;
    double analytic_worst = 0.0;
    double numeric_worst = 0.0;
    bool ok = true;  // false when f produced a non-finite value
    std::size_t offending_coord = 0;
    std::string message;
};

// Central differences (f(x+h*e_i) - f(x-h*e_i)) / 2h against a supplied
// analytic gradient; relative error denominator is
// max(|analytic|, |numeric|, 1e-8).
FiniteDiffReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                   std::span<const double> theta,
                                   std::span<const double> analytic,
                                   double h);

// Harness over the autograd engine: flattens `leaves` into a parameter
// vector, obtains the analytic gradient from backward(build()), and runs
// finite_diff_check on the rebuilt forward. Leaves must require grad; their
// values are restored before returning.
FiniteDiffReport check_gradients(const std::function<Tensor()>& build,
                                 std::span<Tensor> leaves,
                                 double h = 1e-4);

}  // namespace mps
