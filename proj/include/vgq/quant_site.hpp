// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <span>
#include <vector>

#include "vgq/codebook.hpp"

namespace vgq {

/// How quantization sites behave.
///  - nearest: snap to the nearest entry (training / inference).
///  - passthrough: no quantization; the branch is a plain differentiable map.
///  - frozen: reuse the entries chosen by the previous `nearest` forward as
///    constants, giving the smooth surrogate x + (e - x0) whose derivative is
///    the straight-through Jacobian (used by gradient checks).
enum class QuantMode { nearest, passthrough, frozen };

/// One place in the network where vectors are snapped to a codebook, with
/// the state needed for the straight-through backward.
template <class T>
class QuantSite {
public:
    struct Result {
        std::vector<int> indices;
        std::vector<T> values;
    };

    Result run(const std::vector<T>& x, const Codebook<T>& cb, QuantMode mode) {
        const int dim = cb.dim();
        require(x.size() % dim == 0, "quantization: vector width does not match codebook dimension");
        const size_t n = x.size() / dim;
        Result q;
        if (mode == QuantMode::frozen) {
            require(base_.size() == x.size(), "quantization: frozen mode without a matching nearest pass");
            q.indices = indices_;
            q.values.resize(x.size());
            for (size_t i = 0; i < x.size(); ++i) q.values[i] = x[i] + (entries_[i] - base_[i]);
            return q;
        }
        q.indices.resize(n);
        for (size_t i = 0; i < n; ++i) q.indices[i] = nearest_entry(cb, std::span<const T>(x).subspan(i * dim, dim));
        if (mode == QuantMode::passthrough) {
            q.values = x;
            base_.clear();
            entries_.clear();
            indices_.clear();
            return q;
        }
        q.values.resize(x.size());
        for (size_t i = 0; i < n; ++i) {
            const auto e = cb.entry(q.indices[i]);
            std::copy(e.begin(), e.end(), q.values.begin() + i * dim);
        }
        base_ = x;
        entries_ = q.values;
        indices_ = q.indices;
        return q;
    }

    bool active() const { return !entries_.empty(); }

    /// beta * mean ||x - sg(e)||^2 against the entries of the last nearest pass.
    T commitment(const std::vector<T>& x, int dim, T beta) const {
        if (!active()) return T(0);
        const size_t n = x.size() / dim;
        if (n == 0) return T(0);
        double s = 0.0;
        for (size_t i = 0; i < x.size(); ++i) {
            const double diff = static_cast<double>(x[i]) - entries_[i];
            s += diff * diff;
        }
        return static_cast<T>(static_cast<double>(beta) * s / static_cast<double>(n));
    }

    void commitment_grad(const std::vector<T>& x, int dim, T beta, T scale, std::vector<T>& grad) const {
        if (!active() || scale == T(0)) return;
        commitment_backward<T>(x, entries_, dim, beta, scale, grad);
    }

private:
    std::vector<T> base_;
    std::vector<T> entries_;
    std::vector<int> indices_;
};

} // namespace vgq
