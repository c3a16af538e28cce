// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "vgq/codebook.hpp"
#include "vgq/config.hpp"
#include "vgq/nets/autoencoder.hpp"
#include "vgq/nets/fusion.hpp"
#include "vgq/nets/gaussian_branch.hpp"
#include "vgq/nets/vq_branch.hpp"

namespace vgq {

/// Discrete code of one image. For the Gaussian branch `geo` and `opacity`
/// hold tokens*M indices and `feat` tokens (shared) or tokens*M entries; for
/// the dual-VQ baseline `vq2` holds the second grid.
struct TokenSequence {
    std::string id;
    std::vector<int> vq;
    std::vector<int> geo;
    std::vector<int> feat;
    std::vector<int> opacity;
    std::vector<int> vq2;
};

/// Fixed opacity levels (i + 1) / L, i = 0..L-1.
template <class T>
Codebook<T> make_opacity_codebook(int levels) {
    Codebook<T> cb(levels, 1, T(1));
    for (int i = 0; i < levels; ++i) cb.entry(i)[0] = static_cast<T>(i + 1) / static_cast<T>(levels);
    cb.mark_initialized();
    return cb;
}

/// Dual-branch tokenizer: shared encoder, VQ branch, 2DGS branch (or a second
/// VQ branch for the baseline), fusion and decoder.
template <class T>
class VgqModel {
public:
    struct Forward {
        Tensor<T> latent;  // F
        Tensor<T> vq;      // F_VQ
        Tensor<T> second;  // F_2DGS or F_VQ2
        Tensor<T> fused;
        Tensor<T> recon;
        typename VqBranch<T>::Output vq_out;
        typename VqBranch<T>::Output vq2_out;
        typename GaussianBranch<T>::Output gs_out;
        T commitment = T(0);
    };

    VgqModel() = default;
    explicit VgqModel(const ModelConfig& cfg, T ema_decay = T(0.99))
        : cfg_(cfg), encoder_(cfg), decoder_(cfg), vq_("vq", cfg.channels, false), fusion_(cfg.fusion, cfg.channels) {
        cfg.validate();
        vq_cb_ = Codebook<T>(cfg.k_vq, cfg.channels, ema_decay);
        if (cfg.branch == BranchMode::gaussian) {
            gs_ = GaussianBranch<T>(cfg);
            geo_cb_ = Codebook<T>(cfg.k_geo, kGeoDim, ema_decay);
            const T big = std::numeric_limits<T>::max();
            geo_cb_.set_bounds({T(0), T(0), T(0), -big, -big}, {T(1), T(1), T(1), big, big});
            feat_cb_ = Codebook<T>(cfg.k_feat, cfg.channels, ema_decay);
            opacity_cb_ = make_opacity_codebook<T>(cfg.opacity_levels);
        } else {
            vq2_ = VqBranch<T>("vq2", cfg.channels, true);
            vq2_cb_ = Codebook<T>(cfg.k_vq, cfg.channels, ema_decay);
        }
    }

    const ModelConfig& config() const { return cfg_; }
    bool gaussian() const { return cfg_.branch == BranchMode::gaussian; }

    void init(Rng& rng) {
        encoder_.init(rng);
        decoder_.init(rng);
        vq_.init(rng);
        if (gaussian()) gs_.init(rng);
        else vq2_.init(rng);
        fusion_.init(rng);
    }

    ParamRefs<T> params() {
        ParamRefs<T> out;
        encoder_.params(out);
        vq_.params(out);
        if (gaussian()) gs_.params(out);
        else vq2_.params(out);
        fusion_.params(out);
        decoder_.params(out);
        return out;
    }

    /// Learned codebooks with their report names (the opacity levels are
    /// fixed and listed separately).
    std::vector<std::pair<std::string, Codebook<T>*>> codebooks() {
        if (gaussian()) return {{"vq", &vq_cb_}, {"geo", &geo_cb_}, {"feat", &feat_cb_}};
        return {{"vq", &vq_cb_}, {"vq2", &vq2_cb_}};
    }
    Codebook<T>& vq_codebook() { return vq_cb_; }
    Codebook<T>& vq2_codebook() { return vq2_cb_; }
    Codebook<T>& geo_codebook() { return geo_cb_; }
    Codebook<T>& feat_codebook() { return feat_cb_; }
    Codebook<T>& opacity_codebook() { return opacity_cb_; }

    Encoder<T>& encoder() { return encoder_; }
    Decoder<T>& decoder() { return decoder_; }
    GaussianBranch<T>& gaussian_branch() { return gs_; }
    VqBranch<T>& vq_branch() { return vq_; }
    Fusion<T>& fusion() { return fusion_; }

    void set_workers(int w) {
        workers_ = w;
        gs_.set_workers(w);
    }

    Forward forward(const Tensor<T>& images, QuantMode mode = QuantMode::nearest, T beta = T(0.25)) {
        Forward f;
        f.latent = encoder_.forward(images);
        f.vq_out = vq_.forward(f.latent, vq_cb_, mode, beta);
        f.vq = f.vq_out.features;
        if (gaussian()) {
            f.gs_out = gs_.forward(f.latent, geo_cb_, feat_cb_, opacity_cb_, mode, beta, workers_);
            f.second = f.gs_out.features;
            f.commitment = f.vq_out.commitment + f.gs_out.commitment;
        } else {
            f.vq2_out = vq2_.forward(f.latent, vq2_cb_, mode, beta);
            f.second = f.vq2_out.features;
            f.commitment = f.vq_out.commitment + f.vq2_out.commitment;
        }
        f.fused = fusion_.forward(f.vq, f.second);
        f.recon = decoder_.forward(f.fused);
        return f;
    }

    /// Backpropagates dL/d(recon) plus `commit_scale` times the commitment
    /// terms into every parameter gradient.
    void backward(const Tensor<T>& drecon, T commit_scale = T(1)) {
        const Tensor<T> dfused = decoder_.backward(drecon);
        auto [dvq, dsecond] = fusion_.backward(dfused);
        Tensor<T> dF = vq_.backward(dvq, commit_scale);
        if (gaussian()) dF += gs_.backward(dsecond, commit_scale);
        else dF += vq2_.backward(dsecond, commit_scale);
        encoder_.backward(dF);
    }

    /// Seeds every learned codebook from one batch of encoder outputs.
    void init_codebooks(const Tensor<T>& images, Rng& rng) {
        const Tensor<T> F = encoder_.forward(images);
        vq_cb_.init_from(to_rows(F), rng);
        if (gaussian()) {
            const auto out = gs_.forward(F, geo_cb_, feat_cb_, opacity_cb_, QuantMode::passthrough, T(0), workers_);
            geo_cb_.init_from(out.geo_vectors, rng);
            feat_cb_.init_from(out.feat_vectors, rng);
        } else {
            vq2_cb_.init_from(to_rows(vq2_.inputs(F)), rng);
        }
    }

    std::vector<TokenSequence> tokenize(const Tensor<T>& images) {
        const auto f = forward(images, QuantMode::nearest);
        return split_tokens(f, images.n());
    }

    std::vector<TokenSequence> split_tokens(const Forward& f, int N) const {
        const int Tk = cfg_.tokens(), M = cfg_.gaussians_per_token;
        const int FP = cfg_.feature_layout == FeatureLayout::shared ? 1 : M;
        std::vector<TokenSequence> out(N);
        auto cut = [](const std::vector<int>& v, int n, int per) {
            return std::vector<int>(v.begin() + static_cast<size_t>(n) * per, v.begin() + static_cast<size_t>(n + 1) * per);
        };
        for (int n = 0; n < N; ++n) {
            out[n].vq = cut(f.vq_out.indices, n, Tk);
            if (gaussian()) {
                out[n].geo = cut(f.gs_out.geo_indices, n, Tk * M);
                out[n].opacity = cut(f.gs_out.opacity_indices, n, Tk * M);
                out[n].feat = cut(f.gs_out.feat_indices, n, Tk * FP);
            } else {
                out[n].vq2 = cut(f.vq2_out.indices, n, Tk);
            }
        }
        return out;
    }

    /// Checks every index against its codebook; throws DataError naming the
    /// image, field and position of the first violation.
    void validate_tokens(const std::vector<TokenSequence>& tokens) const {
        const int Tk = cfg_.tokens(), M = cfg_.gaussians_per_token;
        const int FP = cfg_.feature_layout == FeatureLayout::shared ? 1 : M;
        auto check = [](const TokenSequence& s, size_t img, const char* field, const std::vector<int>& v,
                        size_t expect, int K) {
            if (v.size() != expect)
                throw DataError("token record " + std::to_string(img) + " ('" + s.id + "'): field '" + field + "' has " +
                                std::to_string(v.size()) + " entries, expected " + std::to_string(expect));
            for (size_t i = 0; i < v.size(); ++i)
                if (v[i] < 0 || v[i] >= K)
                    throw DataError("token record " + std::to_string(img) + " ('" + s.id + "'): field '" + field +
                                    "' position " + std::to_string(i) + ": index " + std::to_string(v[i]) +
                                    " outside [0, " + std::to_string(K) + ")");
        };
        for (size_t i = 0; i < tokens.size(); ++i) {
            const auto& s = tokens[i];
            check(s, i, "vq", s.vq, Tk, cfg_.k_vq);
            if (gaussian()) {
                check(s, i, "geo", s.geo, static_cast<size_t>(Tk) * M, cfg_.k_geo);
                check(s, i, "opacity", s.opacity, static_cast<size_t>(Tk) * M, cfg_.opacity_levels);
                check(s, i, "feat", s.feat, static_cast<size_t>(Tk) * FP, cfg_.k_feat);
            } else {
                check(s, i, "vq2", s.vq2, Tk, cfg_.k_vq);
            }
        }
    }

    /// Reconstruction from indices alone: codebook lookups, splatting,
    /// fusion, decoder.
    Tensor<T> detokenize(const std::vector<TokenSequence>& tokens) {
        validate_tokens(tokens);
        const int N = static_cast<int>(tokens.size()), G = cfg_.grid();
        std::vector<int> vq_idx;
        for (const auto& s : tokens) vq_idx.insert(vq_idx.end(), s.vq.begin(), s.vq.end());
        const Tensor<T> fvq = VqBranch<T>::lookup(vq_cb_, vq_idx, N, G, G);
        Tensor<T> second;
        if (gaussian()) {
            std::vector<T> geo, op, feat;
            for (const auto& s : tokens) {
                for (int j : s.geo) {
                    const auto e = geo_cb_.entry(j);
                    geo.insert(geo.end(), e.begin(), e.end());
                }
                for (int j : s.opacity) op.push_back(opacity_cb_.entry(j)[0]);
                for (int j : s.feat) {
                    const auto e = feat_cb_.entry(j);
                    feat.insert(feat.end(), e.begin(), e.end());
                }
            }
            second = gs_.splat_images(geo, op, feat, N);
        } else {
            std::vector<int> idx;
            for (const auto& s : tokens) idx.insert(idx.end(), s.vq2.begin(), s.vq2.end());
            second = VqBranch<T>::lookup(vq2_cb_, idx, N, G, G);
        }
        return decoder_.forward(fusion_.forward(fvq, second));
    }

private:
    ModelConfig cfg_;
    Encoder<T> encoder_;
    Decoder<T> decoder_;
    VqBranch<T> vq_, vq2_;
    GaussianBranch<T> gs_;
    Fusion<T> fusion_;
    Codebook<T> vq_cb_, vq2_cb_, geo_cb_, feat_cb_, opacity_cb_;
    int workers_ = 1;
};

} // namespace vgq
