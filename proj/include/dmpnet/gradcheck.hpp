#pragma once

// Finite-difference gradient verification. Runs entirely in double precision:
// central differences with the default 1e-4 step lose too many digits in
// 32-bit arithmetic to support a 1e-4 relative tolerance.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmpnet/tensor.hpp"

namespace dmpnet {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // where the largest deviation occurred
    bool ok(double tol) const { return max_rel_err <= tol; }
};

// Compares tape gradients of a scalar-valued function against central finite
// differences, perturbing every element of every listed leaf. The function is
// evaluated once under a fresh tape for the analytic pass and tape-free for
// the difference quotients, so `fn` must build its graph from the given
// leaves on every call. Leaves must have requires_grad set.
//
// The per-element error is |analytic - numeric| / max(1, |analytic|, |numeric|),
// i.e. relative for large gradients and absolute below magnitude one.
inline GradCheckResult check_gradients(const std::function<TensorD()>& fn,
                                       const std::vector<TensorD>& leaves,
                                       double step = 1e-4) {
    require(!leaves.empty(), "check_gradients: no leaves given");
    for (const auto& leaf : leaves)
        require(leaf.requires_grad(), "check_gradients: leaf lacks requires_grad");

    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        TensorD loss = fn();
        tape.backward(loss);
        for (const auto& leaf : leaves) analytic.push_back(leaf.grad());
    }

    require(Tape<double>::active() == nullptr,
            "check_gradients: must not run under an enclosing tape");

    GradCheckResult res;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        TensorD leaf = leaves[li];
        for (std::int64_t i = 0; i < leaf.numel(); ++i) {
            const double saved = leaf.data()[i];
            leaf.data()[i] = saved + step;
            const double up = fn().data()[0];
            leaf.data()[i] = saved - step;
            const double down = fn().data()[0];
            leaf.data()[i] = saved;

            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[li][i];
            const double denom = std::max({1.0, std::fabs(a), std::fabs(numeric)});
            const double err = std::fabs(a - numeric) / denom;
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst = "leaf " + std::to_string(li) + " elem " + std::to_string(i) +
                            ": analytic " + std::to_string(a) + " vs fd " +
                            std::to_string(numeric);
            }
        }
    }
    return res;
}

}  // namespace dmpnet
