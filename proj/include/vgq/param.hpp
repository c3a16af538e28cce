// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "vgq/tensor.hpp"

namespace vgq {

using Rng = std::mt19937_64;

/// A learnable array with its gradient accumulator.
template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, int a, int b, int c, int d)
        : name(std::move(n)), value(a, b, c, d), grad(a, b, c, d) {}

    void zero_grad() { grad.zero(); }
};

template <class T>
using ParamRefs = std::vector<Param<T>*>;

template <class T>
void zero_grads(const ParamRefs<T>& ps) {
    for (auto* p : ps) p->zero_grad();
}

template <class T>
double grad_norm(const ParamRefs<T>& ps) {
    double s = 0.0;
    for (auto* p : ps)
        for (T g : p->grad.values()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
}

/// Uniform(-bound, bound) fill with bound = gain * sqrt(3 / fan_in).
template <class T>
void init_uniform_fan_in(Tensor<T>& t, int fan_in, double gain, Rng& rng) {
    const double bound = gain * std::sqrt(3.0 / std::max(1, fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(u(rng));
}

/// Sum of all parameter bytes folded into a 64-bit FNV-1a hash; used to prove
/// read-only passes do not touch weights.
template <class T>
uint64_t checksum(const ParamRefs<T>& ps) {
    uint64_t h = 1469598103934665603ull;
    for (auto* p : ps) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p->value.data());
        for (size_t i = 0; i < p->value.size() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

} // namespace vgq
