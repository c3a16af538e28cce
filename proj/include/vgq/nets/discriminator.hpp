// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <string>
#include <vector>

#include "vgq/config.hpp"
#include "vgq/nn/layers.hpp"

namespace vgq {

/// PatchGAN-style critic: `layers` stride-2 4x4 convolutions (width doubling,
/// capped at 4x) followed by a 1x1 conv to one logit per patch. With three
/// layers a 32x32 image maps to 4x4 logits, each seeing a 22-pixel patch.
template <class T>
class Discriminator {
public:
    Discriminator() = default;
    explicit Discriminator(const ModelConfig& cfg) {
        int in = 3;
        for (int l = 0; l < cfg.disc_layers; ++l) {
            const int out = cfg.disc_width << std::min(l, 2);
            convs_.emplace_back("disc.conv" + std::to_string(l), in, out, 4, 2, 1);
            in = out;
        }
        acts_.resize(convs_.size());
        head_ = nn::Conv2d<T>("disc.head", in, 1, 1, 1, 0);
    }

    void init(Rng& rng) {
        for (auto& c : convs_) c.init(rng);
        head_.init(rng);
    }
    void params(ParamRefs<T>& out) {
        for (auto& c : convs_) c.params(out);
        head_.params(out);
    }

    Tensor<T> forward(const Tensor<T>& image) {
        require(image.c() == 3, "discriminate: expected RGB input");
        Tensor<T> h = image;
        for (size_t l = 0; l < convs_.size(); ++l) h = acts_[l].forward(convs_[l].forward(h));
        return head_.forward(h);
    }

    /// dL/d(image); parameter gradients accumulate.
    Tensor<T> backward(const Tensor<T>& dlogits) {
        Tensor<T> d = head_.backward(dlogits);
        for (size_t l = convs_.size(); l-- > 0;) d = convs_[l].backward(acts_[l].backward(d));
        return d;
    }

private:
    std::vector<nn::Conv2d<T>> convs_;
    std::vector<nn::SiLU<T>> acts_;
    nn::Conv2d<T> head_;
};

} // namespace vgq
