#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "facl/error.hpp"
#include "facl/tensor.hpp"

namespace facl {

// Heavy-ball SGD state: one velocity tensor per parameter, same shape.
struct OptimizerState {
    double learning_rate = 0.1;
    double momentum = 0.9;
    std::vector<Tensor> velocity;
};

inline OptimizerState make_sgd_state(std::span<const Tensor> params, double learning_rate, double momentum) {
    if (!(learning_rate > 0.0)) throw ValueError("sgd: learning rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValueError("sgd: momentum must lie in [0, 1)");
    OptimizerState state{learning_rate, momentum, {}};
    state.velocity.reserve(params.size());
    for (const Tensor& p : params) state.velocity.emplace_back(p.shape());
    return state;
}

/// v <- momentum * v + g;  p <- p - lr * v
inline void sgd_momentum_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state) {
    if (params.size() != grads.size() || params.size() != state.velocity.size()) {
        throw ShapeError("sgd_momentum_step: parameter, gradient and velocity counts differ");
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        Tensor& v = state.velocity[k];
        const Tensor& g = grads[k];
        if (p.shape() != g.shape() || p.shape() != v.shape()) {
            throw ShapeError("sgd_momentum_step: shape mismatch at parameter " + std::to_string(k));
        }
        auto pv = p.data();
        auto vv = v.data();
        auto gv = g.data();
        for (std::size_t i = 0; i < pv.size(); ++i) {
            vv[i] = state.momentum * vv[i] + gv[i];
            pv[i] -= state.learning_rate * vv[i];
        }
        require_finite(p, "sgd_momentum_step");
    }
}

inline void sgd_momentum_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
    std::vector<Tensor*> ptrs;
    ptrs.reserve(params.size());
    for (Tensor& p : params) ptrs.push_back(&p);
    sgd_momentum_step(std::span<Tensor* const>(ptrs), grads, state);
}

/// target <- m * target + (1 - m) * source, elementwise. The endpoints m = 1
/// and m = 0 are exact: identity and copy respectively.
inline void ema_update(Tensor& target, const Tensor& source, double m) {
    if (!(m >= 0.0 && m <= 1.0)) throw ValueError("ema_update: coefficient must lie in [0, 1]");
    require_same_shape(target, source, "ema_update");
    if (m == 1.0) return;
    if (m == 0.0) {
        target = source;
        return;
    }
    auto t = target.data();
    auto s = source.data();
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = m * t[i] + (1.0 - m) * s[i];
}

inline void ema_update(std::span<Tensor* const> targets, std::span<const Tensor* const> sources, double m) {
    if (targets.size() != sources.size()) throw ShapeError("ema_update: tensor counts differ");
    for (std::size_t k = 0; k < targets.size(); ++k) ema_update(*targets[k], *sources[k], m);
}

}  // namespace facl
