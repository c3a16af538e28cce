// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "vgq/errors.hpp"
#include "vgq/nn/layers.hpp"

namespace vgq {

/// Frozen multi-layer feature extractor phi_l used by the perceptual loss.
/// Implementations are stateless between calls so the same extractor can
/// serve both images of a pair.
template <class T>
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string name() const = 0;
    virtual std::vector<Tensor<T>> features(const Tensor<T>& images) const = 0;
    /// d(sum_l <grads_l, phi_l(images)>) / d images.
    virtual Tensor<T> vjp(const Tensor<T>& images, const std::vector<Tensor<T>>& grads) const = 0;
};

/// phi_0 = the image itself; the perceptual loss then reduces to MSE.
template <class T>
class IdentityExtractor final : public FeatureExtractor<T> {
public:
    std::string name() const override { return "identity"; }
    std::vector<Tensor<T>> features(const Tensor<T>& images) const override { return {images}; }
    Tensor<T> vjp(const Tensor<T>&, const std::vector<Tensor<T>>& grads) const override { return grads.at(0); }
};

/// Seeded random convolutional stack with frozen weights; three SiLU layers
/// at full, half and quarter resolution.
template <class T>
class RandomConvExtractor final : public FeatureExtractor<T> {
public:
    explicit RandomConvExtractor(uint64_t seed) {
        Rng rng(seed);
        const int widths[] = {8, 16, 32};
        int in = 3;
        for (int l = 0; l < 3; ++l) {
            layers_.emplace_back("perceptual.conv" + std::to_string(l), in, widths[l], 3, l == 0 ? 1 : 2, 1);
            layers_.back().init(rng, 1.0);
            in = widths[l];
        }
    }

    std::string name() const override { return "random_conv"; }

    std::vector<Tensor<T>> features(const Tensor<T>& images) const override {
        std::vector<Tensor<T>> out;
        Tensor<T> h = images;
        for (const auto& l : layers_) {
            h = nn::SiLU<T>::apply(l.apply(h));
            out.push_back(h);
        }
        return out;
    }

    Tensor<T> vjp(const Tensor<T>& images, const std::vector<Tensor<T>>& grads) const override {
        // Replay on private copies so the shared extractor stays immutable.
        auto layers = layers_;
        std::vector<nn::SiLU<T>> acts(layers.size());
        Tensor<T> h = images;
        for (size_t l = 0; l < layers.size(); ++l) h = acts[l].forward(layers[l].forward(h));
        Tensor<T> d = grads.back();
        for (size_t l = layers.size(); l-- > 0;) {
            if (l + 1 < layers.size()) d += grads[l];
            d = layers[l].backward(acts[l].backward(d));
        }
        return d;
    }

private:
    std::vector<nn::Conv2d<T>> layers_;
};

template <class T>
using ExtractorFactory = std::function<std::unique_ptr<FeatureExtractor<T>>(uint64_t seed)>;

template <class T>
std::map<std::string, ExtractorFactory<T>>& extractor_registry() {
    static std::map<std::string, ExtractorFactory<T>> reg = {
        {"random_conv", [](uint64_t s) { return std::make_unique<RandomConvExtractor<T>>(s); }},
        {"identity", [](uint64_t) { return std::make_unique<IdentityExtractor<T>>(); }},
    };
    return reg;
}

/// Registers an externally supplied extractor (e.g. a pretrained network).
template <class T>
void register_extractor(const std::string& name, ExtractorFactory<T> factory) {
    extractor_registry<T>()[name] = std::move(factory);
}

template <class T>
std::unique_ptr<FeatureExtractor<T>> make_extractor(const std::string& name, uint64_t seed) {
    const auto& reg = extractor_registry<T>();
    const auto it = reg.find(name);
    if (it == reg.end()) throw ConfigError("unknown perceptual extractor '" + name + "'");
    return it->second(seed);
}

/// List of feature maps phi_l(image).
template <class T>
std::vector<Tensor<T>> perceptual_features(const Tensor<T>& image, const FeatureExtractor<T>& extractor) {
    return extractor.features(image);
}

} // namespace vgq
