// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "vgq/param.hpp"

namespace vgq {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment buffers, one per parameter in registration order.
template <class T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    int64_t step = 0;

    void reset(const ParamRefs<T>& params) {
        m.clear();
        v.clear();
        for (const auto* p : params) {
            m.emplace_back(p->value.shape());
            v.emplace_back(p->value.shape());
        }
        step = 0;
    }
};

/// Adaptive-moment update with bias correction. Moments are lazily created
/// (zero) on first use.
template <class T>
void optimizer_step(const ParamRefs<T>& params, AdamState<T>& state, double learning_rate, const AdamOptions& opt = {}) {
    if (state.m.size() != params.size()) state.reset(params);
    ++state.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (size_t k = 0; k < params.size(); ++k) {
        auto& p = *params[k];
        auto& m = state.m[k];
        auto& v = state.v[k];
        require(m.same_shape(p.value), "optimizer_step: moment shape mismatch for " + p.name);
        for (size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            const double mi = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            const double vi = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            if (learning_rate != 0.0)
                p.value[i] = static_cast<T>(p.value[i] - learning_rate * (mi / c1) / (std::sqrt(vi / c2) + opt.eps));
        }
    }
}

/// Scales every gradient so the global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
template <class T>
double clip_grad_norm(const ParamRefs<T>& params, double max_norm) {
    const double norm = grad_norm(params);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / (norm + 1e-12));
        for (auto* p : params) p->grad *= s;
    }
    return norm;
}

} // namespace vgq
