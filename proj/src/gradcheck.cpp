#include "mps/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace mps {

FiniteDiffReport finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                   std::span<const double> theta,
                                   std::span<const double> analytic,
                                   double h) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
    if (theta.size() != analytic.size())
        throw std::invalid_argument("finite_diff_check: analytic gradient length mismatch");
    FiniteDiffReport rep;
    std::vector<double> work(theta.begin(), theta.end());
    for (std::size_t i = 0; i < work.size(); ++i) {
        double orig = work[i];
        work[i] = orig + h;
        double fp = f(work);
        work[i] = orig - h;
        double fm = f(work);
        work[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            rep.ok = false;
            rep.offending_coord = i;
            rep.message = "non-finite evaluation at coordinate " + std::to_string(i);
            return rep;
        }
        double numeric = (fp - fm) / (2.0 * h);
        double a = analytic[i];
        double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        double rel = std::fabs(a - numeric) / denom;
        if (rel > rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_coord = i;
            rep.analytic_worst = a;
            rep.numeric_worst = numeric;
        }
    }
    return rep;
}

FiniteDiffReport check_gradients(const std::function<Tensor()>& build,
                                 std::span<Tensor> leaves,
                                 double h) {
    std::vector<double> theta;
    for (const auto& l : leaves) theta.insert(theta.end(), l.data().begin(), l.data().end());

    auto load = [&](std::span<const double> v) {
        std::size_t off = 0;
        for (auto& l : leaves) {
            std::copy(v.begin() + off, v.begin() + off + l.numel(), l.data().begin());
            off += l.numel();
        }
    };

    Tensor loss = build();
    backward(loss);
    std::vector<double> analytic;
    for (auto& l : leaves) {
        if (l.has_grad()) {
            analytic.insert(analytic.end(), l.grad().begin(), l.grad().end());
        } else {
            analytic.insert(analytic.end(), l.numel(), 0.0);
        }
    }

    auto f = [&](std::span<const double> v) {
        load(v);
        return build().value();
    };
    FiniteDiffReport rep = finite_diff_check(f, theta, analytic, h);
    load(theta);
    return rep;
}

}  // namespace mps
