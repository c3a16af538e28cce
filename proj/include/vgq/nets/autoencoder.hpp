// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "vgq/config.hpp"
#include "vgq/nn/layers.hpp"

namespace vgq {

/// Channel width at downsampling stage i (doubling, capped at 4x base).
inline int stage_width(const ModelConfig& cfg, int stage) {
    return cfg.base_width << std::min(stage, 2);
}

/// Convolutional encoder: image (N,3,R,R) in [0,1] -> feature map (N,d,R/r,R/r).
template <class T>
class Encoder {
public:
    Encoder() = default;
    explicit Encoder(const ModelConfig& cfg) : cfg_(cfg) {
        const int S = cfg.stages();
        conv_in_ = nn::Conv2d<T>("encoder.conv_in", 3, stage_width(cfg, 0), 3, 1, 1);
        for (int s = 0; s < S; ++s) {
            Stage st;
            for (int b = 0; b < cfg.res_blocks; ++b)
                st.blocks.emplace_back("encoder.stage" + std::to_string(s) + ".block" + std::to_string(b),
                                       stage_width(cfg, s));
            st.down = nn::Conv2d<T>("encoder.stage" + std::to_string(s) + ".down", stage_width(cfg, s),
                                    stage_width(cfg, s + 1), 3, 2, 1);
            stages_.push_back(std::move(st));
        }
        for (int b = 0; b < cfg.res_blocks; ++b)
            mid_.emplace_back("encoder.mid.block" + std::to_string(b), stage_width(cfg, S));
        conv_out_ = nn::Conv2d<T>("encoder.conv_out", stage_width(cfg, S), cfg.channels, 1, 1, 0);
    }

    void init(Rng& rng) {
        conv_in_.init(rng);
        for (auto& st : stages_) {
            for (auto& b : st.blocks) b.init(rng);
            st.down.init(rng);
        }
        for (auto& b : mid_) b.init(rng);
        conv_out_.init(rng);
    }

    void params(ParamRefs<T>& out) {
        conv_in_.params(out);
        for (auto& st : stages_) {
            for (auto& b : st.blocks) b.params(out);
            st.down.params(out);
        }
        for (auto& b : mid_) b.params(out);
        conv_out_.params(out);
    }

    Tensor<T> forward(const Tensor<T>& image) {
        if (image.c() != 3 || image.h() != cfg_.resolution || image.w() != cfg_.resolution)
            throw ContractError("encode: expected (N,3," + std::to_string(cfg_.resolution) + "," +
                                std::to_string(cfg_.resolution) + ") input, got " + shape_string(image.shape()));
        Tensor<T> h = conv_in_.forward(image);
        for (auto& st : stages_) {
            for (auto& b : st.blocks) h = b.forward(h);
            h = st.down.forward(h);
        }
        for (auto& b : mid_) h = b.forward(h);
        return conv_out_.forward(act_.forward(h));
    }

    Tensor<T> backward(const Tensor<T>& dfeat) {
        Tensor<T> d = act_.backward(conv_out_.backward(dfeat));
        for (auto it = mid_.rbegin(); it != mid_.rend(); ++it) d = it->backward(d);
        for (auto st = stages_.rbegin(); st != stages_.rend(); ++st) {
            d = st->down.backward(d);
            for (auto b = st->blocks.rbegin(); b != st->blocks.rend(); ++b) d = b->backward(d);
        }
        return conv_in_.backward(d);
    }

private:
    struct Stage {
        std::vector<nn::ResBlock<T>> blocks;
        nn::Conv2d<T> down;
    };
    ModelConfig cfg_;
    nn::Conv2d<T> conv_in_, conv_out_;
    std::vector<Stage> stages_;
    std::vector<nn::ResBlock<T>> mid_;
    nn::SiLU<T> act_;
};

/// Mirror of the encoder: (N,d,H,W) -> (N,3,R,R) through nearest upsampling
/// and a sigmoid output.
template <class T>
class Decoder {
public:
    Decoder() = default;
    explicit Decoder(const ModelConfig& cfg) : cfg_(cfg) {
        const int S = cfg.stages();
        conv_in_ = nn::Conv2d<T>("decoder.conv_in", cfg.channels, stage_width(cfg, S), 3, 1, 1);
        for (int b = 0; b < cfg.res_blocks; ++b)
            mid_.emplace_back("decoder.mid.block" + std::to_string(b), stage_width(cfg, S));
        for (int s = S - 1; s >= 0; --s) {
            Stage st;
            st.up = nn::Conv2d<T>("decoder.stage" + std::to_string(s) + ".up", stage_width(cfg, s + 1),
                                  stage_width(cfg, s), 3, 1, 1);
            for (int b = 0; b < cfg.res_blocks; ++b)
                st.blocks.emplace_back("decoder.stage" + std::to_string(s) + ".block" + std::to_string(b),
                                       stage_width(cfg, s));
            stages_.push_back(std::move(st));
        }
        conv_out_ = nn::Conv2d<T>("decoder.conv_out", stage_width(cfg, 0), 3, 3, 1, 1);
    }

    void init(Rng& rng) {
        conv_in_.init(rng);
        for (auto& b : mid_) b.init(rng);
        for (auto& st : stages_) {
            st.up.init(rng);
            for (auto& b : st.blocks) b.init(rng);
        }
        conv_out_.init(rng);
    }

    void params(ParamRefs<T>& out) {
        conv_in_.params(out);
        for (auto& b : mid_) b.params(out);
        for (auto& st : stages_) {
            st.up.params(out);
            for (auto& b : st.blocks) b.params(out);
        }
        conv_out_.params(out);
    }

    Tensor<T> forward(const Tensor<T>& latent) {
        if (latent.c() != cfg_.channels || latent.h() != cfg_.grid() || latent.w() != cfg_.grid())
            throw ContractError("decode: expected (N," + std::to_string(cfg_.channels) + "," +
                                std::to_string(cfg_.grid()) + "," + std::to_string(cfg_.grid()) + ") latent, got " +
                                shape_string(latent.shape()));
        Tensor<T> h = conv_in_.forward(latent);
        for (auto& b : mid_) h = b.forward(h);
        for (auto& st : stages_) {
            h = st.up.forward(nn::Upsample2x<T>::forward(h));
            for (auto& b : st.blocks) h = b.forward(h);
        }
        return out_.forward(conv_out_.forward(act_.forward(h)));
    }

    Tensor<T> backward(const Tensor<T>& dimage) {
        Tensor<T> d = act_.backward(conv_out_.backward(out_.backward(dimage)));
        for (auto st = stages_.rbegin(); st != stages_.rend(); ++st) {
            for (auto b = st->blocks.rbegin(); b != st->blocks.rend(); ++b) d = b->backward(d);
            d = nn::Upsample2x<T>::backward(st->up.backward(d));
        }
        for (auto it = mid_.rbegin(); it != mid_.rend(); ++it) d = it->backward(d);
        return conv_in_.backward(d);
    }

private:
    struct Stage {
        nn::Conv2d<T> up;
        std::vector<nn::ResBlock<T>> blocks;
    };
    ModelConfig cfg_;
    nn::Conv2d<T> conv_in_, conv_out_;
    std::vector<nn::ResBlock<T>> mid_;
    std::vector<Stage> stages_;
    nn::SiLU<T> act_;
    nn::Sigmoid<T> out_;
};

} // namespace vgq
