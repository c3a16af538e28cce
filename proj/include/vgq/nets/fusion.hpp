// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "vgq/config.hpp"
#include "vgq/nets/vq_branch.hpp"
#include "vgq/nn/layers.hpp"

namespace vgq {

/// Merges the appearance map (first input) with the structure map (second).
///
///  hadamard        a * b
///  add             a + b
///  mask_adding     a * sigmoid(mask(a)) + b, mask a 3x3 conv to one channel
///  cross_attention a + softmax((a Wq)(b Wk)^T / sqrt(d)) (b Wv), over the
///                  flattened grid tokens of each image
template <class T>
class Fusion {
public:
    Fusion() = default;
    Fusion(FusionMode mode, int channels) : mode_(mode), d_(channels) {
        if (mode == FusionMode::mask_adding) mask_ = nn::Conv2d<T>("fusion.mask", channels, 1, 3, 1, 1);
        if (mode == FusionMode::cross_attention) {
            wq_ = Param<T>("fusion.attn.wq", 1, 1, channels, channels);
            wk_ = Param<T>("fusion.attn.wk", 1, 1, channels, channels);
            wv_ = Param<T>("fusion.attn.wv", 1, 1, channels, channels);
        }
    }

    FusionMode mode() const { return mode_; }

    void init(Rng& rng) {
        if (mode_ == FusionMode::mask_adding) mask_.init(rng);
        if (mode_ == FusionMode::cross_attention)
            for (auto* p : {&wq_, &wk_, &wv_}) init_uniform_fan_in(p->value, d_, 1.0, rng);
    }

    void params(ParamRefs<T>& out) {
        if (mode_ == FusionMode::mask_adding) mask_.params(out);
        if (mode_ == FusionMode::cross_attention)
            for (auto* p : {&wq_, &wk_, &wv_}) out.push_back(p);
    }

    Tensor<T> forward(const Tensor<T>& a, const Tensor<T>& b) {
        require_same_shape(a, b, "fuse");
        a_ = a;
        b_ = b;
        switch (mode_) {
        case FusionMode::hadamard: {
            Tensor<T> out = a;
            for (size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
            return out;
        }
        case FusionMode::add: {
            Tensor<T> out = a;
            out += b;
            return out;
        }
        case FusionMode::mask_adding: {
            gate_ = nn::Sigmoid<T>::apply(mask_.forward(a));
            Tensor<T> out = a;
            const int HW = a.h() * a.w();
            for (int n = 0; n < a.n(); ++n)
                for (int c = 0; c < a.c(); ++c)
                    for (int p = 0; p < HW; ++p) {
                        const size_t i = (static_cast<size_t>(n) * a.c() + c) * HW + p;
                        out[i] = a[i] * gate_[static_cast<size_t>(n) * HW + p] + b[i];
                    }
            return out;
        }
        case FusionMode::cross_attention: return attention_forward(a, b);
        }
        return a;
    }

    /// Returns (dA, dB).
    std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& dout) {
        require_same_shape(dout, a_, "fuse backward");
        Tensor<T> da(a_.n(), a_.c(), a_.h(), a_.w()), db = da;
        switch (mode_) {
        case FusionMode::hadamard:
            for (size_t i = 0; i < dout.size(); ++i) {
                da[i] = dout[i] * b_[i];
                db[i] = dout[i] * a_[i];
            }
            break;
        case FusionMode::add:
            da = dout;
            db = dout;
            break;
        case FusionMode::mask_adding: {
            const int HW = a_.h() * a_.w();
            Tensor<T> dgate(a_.n(), 1, a_.h(), a_.w());
            for (int n = 0; n < a_.n(); ++n)
                for (int c = 0; c < a_.c(); ++c)
                    for (int p = 0; p < HW; ++p) {
                        const size_t i = (static_cast<size_t>(n) * a_.c() + c) * HW + p;
                        const size_t gi = static_cast<size_t>(n) * HW + p;
                        da[i] = dout[i] * gate_[gi];
                        dgate[gi] += dout[i] * a_[i];
                        db[i] = dout[i];
                    }
            for (size_t i = 0; i < dgate.size(); ++i) dgate[i] *= gate_[i] * (T(1) - gate_[i]);
            da += mask_.backward(dgate);
            break;
        }
        case FusionMode::cross_attention: attention_backward(dout, da, db); break;
        }
        return {std::move(da), std::move(db)};
    }

private:
    using Mat = nn::RowMatrix<T>;

    static Mat tokens(const Tensor<T>& F, int n) {
        const int C = F.c(), HW = F.h() * F.w();
        Mat m(HW, C);
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p) m(p, c) = F.at(n, c, p / F.w(), p % F.w());
        return m;
    }
    static void scatter(const Mat& m, Tensor<T>& F, int n) {
        const int C = F.c(), HW = F.h() * F.w();
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p) F.at(n, c, p / F.w(), p % F.w()) += m(p, c);
    }
    nn::ConstMatMap<T> W(const Param<T>& p) const { return nn::ConstMatMap<T>(p.value.data(), d_, d_); }

    Tensor<T> attention_forward(const Tensor<T>& a, const Tensor<T>& b) {
        Tensor<T> out = a;
        attn_.assign(a.n(), {});
        const T scale = T(1) / std::sqrt(static_cast<T>(d_));
        for (int n = 0; n < a.n(); ++n) {
            auto& c = attn_[n];
            c.A = tokens(a, n);
            c.B = tokens(b, n);
            c.Q = c.A * W(wq_);
            c.K = c.B * W(wk_);
            c.V = c.B * W(wv_);
            Mat S = (c.Q * c.K.transpose()) * scale;
            for (int i = 0; i < S.rows(); ++i) {
                const T mx = S.row(i).maxCoeff();
                S.row(i) = (S.row(i).array() - mx).exp();
                S.row(i) /= S.row(i).sum();
            }
            c.P = S;
            scatter(c.P * c.V, out, n);
        }
        return out;
    }

    void attention_backward(const Tensor<T>& dout, Tensor<T>& da, Tensor<T>& db) {
        const T scale = T(1) / std::sqrt(static_cast<T>(d_));
        da = dout; // residual
        nn::MatMap<T> dWq(wq_.grad.data(), d_, d_), dWk(wk_.grad.data(), d_, d_), dWv(wv_.grad.data(), d_, d_);
        for (int n = 0; n < dout.n(); ++n) {
            const auto& c = attn_[n];
            const Mat dO = tokens(dout, n);
            const Mat dV = c.P.transpose() * dO;
            Mat dP = dO * c.V.transpose();
            Mat dS(dP.rows(), dP.cols());
            for (int i = 0; i < dP.rows(); ++i) {
                const T dot = (dP.row(i).array() * c.P.row(i).array()).sum();
                dS.row(i) = c.P.row(i).array() * (dP.row(i).array() - dot);
            }
            dS *= scale;
            const Mat dQ = dS * c.K;
            const Mat dK = dS.transpose() * c.Q;
            dWq.noalias() += c.A.transpose() * dQ;
            dWk.noalias() += c.B.transpose() * dK;
            dWv.noalias() += c.B.transpose() * dV;
            scatter(dQ * W(wq_).transpose(), da, n);
            scatter(dK * W(wk_).transpose() + dV * W(wv_).transpose(), db, n);
        }
    }

    struct AttnCache {
        Mat A, B, Q, K, V, P;
    };

    FusionMode mode_ = FusionMode::hadamard;
    int d_ = 0;
    nn::Conv2d<T> mask_;
    Param<T> wq_, wk_, wv_;
    Tensor<T> a_, b_, gate_;
    std::vector<AttnCache> attn_;
};

} // namespace vgq
