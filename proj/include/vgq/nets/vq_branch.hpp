// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vgq/codebook.hpp"
#include "vgq/nn/layers.hpp"
#include "vgq/quant_site.hpp"

namespace vgq {

/// (N,C,H,W) -> row-major (N*H*W) x C token vectors.
template <class T>
std::vector<T> to_rows(const Tensor<T>& F) {
    std::vector<T> rows(F.size());
    const int C = F.c(), HW = F.h() * F.w();
    for (int n = 0; n < F.n(); ++n)
        for (int c = 0; c < C; ++c) {
            const T* plane = F.image(n) + static_cast<size_t>(c) * HW;
            for (int p = 0; p < HW; ++p) rows[(static_cast<size_t>(n) * HW + p) * C + c] = plane[p];
        }
    return rows;
}

template <class T>
Tensor<T> from_rows(const std::vector<T>& rows, int N, int C, int H, int W) {
    require(rows.size() == static_cast<size_t>(N) * C * H * W, "from_rows: size mismatch");
    Tensor<T> F(N, C, H, W);
    const int HW = H * W;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            T* plane = F.image(n) + static_cast<size_t>(c) * HW;
            for (int p = 0; p < HW; ++p) plane[p] = rows[(static_cast<size_t>(n) * HW + p) * C + c];
        }
    return F;
}

/// Grid-cell vector quantization: every cell is replaced by its nearest code
/// entry, straight-through in the backward. An optional 1x1 projection in
/// front gives the second, independent branch of the dual-VQ baseline.
template <class T>
class VqBranch {
public:
    struct Output {
        Tensor<T> features;        // F_VQ
        std::vector<int> indices;  // N*H*W
        std::vector<T> vectors;    // pre-quantization rows
        T commitment = T(0);
    };

    VqBranch() = default;
    VqBranch(const std::string& name, int channels, bool projected) : channels_(channels) {
        if (projected) proj_.emplace(name + ".proj", channels, channels, 1, 1, 0);
    }

    void init(Rng& rng) {
        if (proj_) proj_->init(rng);
    }
    void params(ParamRefs<T>& out) {
        if (proj_) proj_->params(out);
    }

    /// Pre-quantization input of this branch (projection applied, no caching).
    Tensor<T> inputs(const Tensor<T>& F) const { return proj_ ? proj_->apply(F) : F; }

    Output forward(const Tensor<T>& F, const Codebook<T>& cb, QuantMode mode, T beta) {
        if (cb.dim() != F.c()) throw ContractError("vq_branch: codebook width does not match channels");
        shape_ = F.shape();
        beta_ = beta;
        const Tensor<T> x = proj_ ? proj_->forward(F) : F;
        rows_ = to_rows(x);
        auto q = site_.run(rows_, cb, mode);
        Output out;
        out.indices = std::move(q.indices);
        out.features = from_rows(q.values, F.n(), F.c(), F.h(), F.w());
        out.commitment = site_.commitment(rows_, cb.dim(), beta);
        out.vectors = rows_;
        return out;
    }

    Tensor<T> backward(const Tensor<T>& dFq, T commit_scale = T(1)) {
        auto g = to_rows(dFq); // straight-through
        site_.commitment_grad(rows_, shape_[1], beta_, commit_scale, g);
        Tensor<T> dx = from_rows(g, shape_[0], shape_[1], shape_[2], shape_[3]);
        return proj_ ? proj_->backward(dx) : dx;
    }

    /// F_VQ from indices alone.
    static Tensor<T> lookup(const Codebook<T>& cb, const std::vector<int>& indices, int N, int H, int W) {
        require(indices.size() == static_cast<size_t>(N) * H * W, "vq lookup: index count mismatch");
        std::vector<T> rows(indices.size() * cb.dim());
        for (size_t i = 0; i < indices.size(); ++i) {
            const auto e = cb.entry(indices[i]);
            std::copy(e.begin(), e.end(), rows.begin() + i * cb.dim());
        }
        return from_rows(rows, N, cb.dim(), H, W);
    }

private:
    int channels_ = 0;
    std::optional<nn::Conv2d<T>> proj_;
    QuantSite<T> site_;
    std::vector<T> rows_;
    std::array<int, 4> shape_{};
    T beta_ = T(0.25);
};

} // namespace vgq
