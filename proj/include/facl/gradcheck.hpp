#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "facl/error.hpp"
#include "facl/tensor.hpp"

namespace facl {

// Scalar objective over a parameter list. When `grads` is non-null the
// callee also writes its analytic gradient there, one tensor per parameter.
using Objective = std::function<double(const std::vector<Tensor>& params, std::vector<Tensor>* grads)>;

/// Max over all coordinates of |g_analytic - g_fd| / max(1, |g_fd|), with
/// g_fd the central difference (f(p + eps) - f(p - eps)) / (2 eps).
inline double finite_difference_check(const Objective& fn, std::vector<Tensor> params, double eps = 1e-5) {
    std::vector<Tensor> analytic;
    fn(params, &analytic);
    if (analytic.size() != params.size()) throw ShapeError("finite_difference_check: gradient count mismatch");
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        require_same_shape(params[k], analytic[k], "finite_difference_check");
        for (std::size_t i = 0; i < params[k].size(); ++i) {
            const double saved = params[k][i];
            params[k][i] = saved + eps;
            const double up = fn(params, nullptr);
            params[k][i] = saved - eps;
            const double down = fn(params, nullptr);
            params[k][i] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double err = std::abs(analytic[k][i] - fd) / std::max(1.0, std::abs(fd));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace facl
