// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vgq/config.hpp"
#include "vgq/errors.hpp"
#include "vgq/nets/perceptual.hpp"
#include "vgq/tensor.hpp"

namespace vgq {

enum class AdvSide { generator, discriminator };

/// Mean absolute error over every pixel and channel.
template <class T>
T loss_rec(const Tensor<T>& target, const Tensor<T>& recon) {
    require_same_shape(target, recon, "loss_rec");
    double s = 0.0;
    for (size_t i = 0; i < target.size(); ++i) s += std::abs(static_cast<double>(target[i]) - recon[i]);
    return static_cast<T>(s / static_cast<double>(target.size()));
}

/// d loss_rec / d recon (subgradient 0 at equality).
template <class T>
Tensor<T> loss_rec_grad(const Tensor<T>& target, const Tensor<T>& recon) {
    require_same_shape(target, recon, "loss_rec_grad");
    Tensor<T> g(recon.shape());
    const T inv = T(1) / static_cast<T>(recon.size());
    for (size_t i = 0; i < g.size(); ++i) {
        const T d = recon[i] - target[i];
        g[i] = d > T(0) ? inv : (d < T(0) ? -inv : T(0));
    }
    return g;
}

/// Least-squares adversarial loss. Generator: mean (D(fake) - 1)^2.
/// Discriminator: mean[(D(real) - 1)^2 + D(fake)^2].
template <class T>
T loss_adv(const Tensor<T>& real_logits, const Tensor<T>& fake_logits, AdvSide side) {
    double s = 0.0;
    if (side == AdvSide::generator) {
        for (T v : fake_logits.values()) s += (static_cast<double>(v) - 1.0) * (static_cast<double>(v) - 1.0);
        return static_cast<T>(s / static_cast<double>(fake_logits.size()));
    }
    require_same_shape(real_logits, fake_logits, "loss_adv");
    for (size_t i = 0; i < real_logits.size(); ++i) {
        const double r = real_logits[i], f = fake_logits[i];
        s += (r - 1.0) * (r - 1.0) + f * f;
    }
    return static_cast<T>(s / static_cast<double>(real_logits.size()));
}

/// Gradient of the generator-side loss w.r.t. the fake logits.
template <class T>
Tensor<T> loss_adv_generator_grad(const Tensor<T>& fake_logits) {
    Tensor<T> g(fake_logits.shape());
    const T k = T(2) / static_cast<T>(fake_logits.size());
    for (size_t i = 0; i < g.size(); ++i) g[i] = k * (fake_logits[i] - T(1));
    return g;
}

/// Gradients of the discriminator-side loss w.r.t. (real, fake) logits.
template <class T>
std::pair<Tensor<T>, Tensor<T>> loss_adv_discriminator_grad(const Tensor<T>& real_logits, const Tensor<T>& fake_logits) {
    require_same_shape(real_logits, fake_logits, "loss_adv_discriminator_grad");
    Tensor<T> gr(real_logits.shape()), gf(fake_logits.shape());
    const T k = T(2) / static_cast<T>(real_logits.size());
    for (size_t i = 0; i < gr.size(); ++i) {
        gr[i] = k * (real_logits[i] - T(1));
        gf[i] = k * fake_logits[i];
    }
    return {gr, gf};
}

/// Sum over layers of the mean squared feature difference.
template <class T>
T loss_perceptual(const Tensor<T>& a, const Tensor<T>& b, const FeatureExtractor<T>& extractor) {
    require_same_shape(a, b, "loss_perceptual");
    const auto fa = extractor.features(a);
    const auto fb = extractor.features(b);
    double s = 0.0;
    for (size_t l = 0; l < fa.size(); ++l) {
        double layer = 0.0;
        for (size_t i = 0; i < fa[l].size(); ++i) {
            const double d = static_cast<double>(fa[l][i]) - fb[l][i];
            layer += d * d;
        }
        s += layer / static_cast<double>(fa[l].size());
    }
    return static_cast<T>(s);
}

/// d loss_perceptual(target, recon) / d recon.
template <class T>
Tensor<T> loss_perceptual_grad(const Tensor<T>& target, const Tensor<T>& recon, const FeatureExtractor<T>& extractor) {
    const auto ft = extractor.features(target);
    const auto fr = extractor.features(recon);
    std::vector<Tensor<T>> g(fr.size());
    for (size_t l = 0; l < fr.size(); ++l) {
        g[l] = Tensor<T>(fr[l].shape());
        const T k = T(2) / static_cast<T>(fr[l].size());
        for (size_t i = 0; i < fr[l].size(); ++i) g[l][i] = k * (fr[l][i] - ft[l][i]);
    }
    return extractor.vjp(recon, g);
}

struct LossComponents {
    double rec = 0.0;
    double adv_g = 0.0;
    double adv_d = 0.0;
    double perceptual = 0.0;
    double commitment = 0.0;
};

/// L_rec + gamma * L_adv_g + eta * L_perc + commitment.
inline double total_loss(const LossComponents& c, double gamma, double eta) {
    for (const auto& [name, v] : {std::pair<const char*, double>{"rec", c.rec},
                                  {"adv_g", c.adv_g},
                                  {"perceptual", c.perceptual},
                                  {"commitment", c.commitment}})
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss component '") + name + "'");
    return c.rec + gamma * c.adv_g + eta * c.perceptual + c.commitment;
}

inline double total_loss(const LossComponents& c, const TrainConfig& cfg) { return total_loss(c, cfg.gamma, cfg.eta); }

} // namespace vgq
