// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vgq/errors.hpp"

namespace vgq {

enum class FusionMode { hadamard, add, mask_adding, cross_attention };
enum class BranchMode { gaussian, dual_vq };
enum class FeatureLayout { shared, per_gaussian };

inline const char* to_string(FusionMode m) {
    switch (m) {
    case FusionMode::hadamard: return "hadamard";
    case FusionMode::add: return "add";
    case FusionMode::mask_adding: return "mask_adding";
    case FusionMode::cross_attention: return "cross_attention";
    }
    return "?";
}
inline const char* to_string(BranchMode m) { return m == BranchMode::gaussian ? "gaussian" : "dual_vq"; }
inline const char* to_string(FeatureLayout m) { return m == FeatureLayout::shared ? "shared" : "per_gaussian"; }

inline FusionMode parse_fusion(const std::string& s) {
    for (auto m : {FusionMode::hadamard, FusionMode::add, FusionMode::mask_adding, FusionMode::cross_attention})
        if (s == to_string(m)) return m;
    throw ConfigError("unknown fusion mode '" + s + "'");
}
inline BranchMode parse_branch(const std::string& s) {
    if (s == "gaussian") return BranchMode::gaussian;
    if (s == "dual_vq") return BranchMode::dual_vq;
    throw ConfigError("unknown branch mode '" + s + "'");
}
inline FeatureLayout parse_layout(const std::string& s) {
    if (s == "shared") return FeatureLayout::shared;
    if (s == "per_gaussian") return FeatureLayout::per_gaussian;
    throw ConfigError("unknown feature layout '" + s + "'");
}

/// Network shapes and branch wiring.
struct ModelConfig {
    int resolution = 32;      // square input side, pixels
    int downsample = 4;       // r; grid side = resolution / r
    int channels = 8;         // latent width d
    int base_width = 64;
    int res_blocks = 2;       // per stage
    int head_width = 32;
    int gaussians_per_token = 1;
    FeatureLayout feature_layout = FeatureLayout::shared;
    int refine_steps = 1;
    FusionMode fusion = FusionMode::hadamard;
    BranchMode branch = BranchMode::gaussian;
    bool quantize = true;
    int k_vq = 1024;
    int k_geo = 1024;
    int k_feat = 1024;
    int opacity_levels = 16;
    double geo_log_scale_center = -2.0; // log-scale standardization for geometry codes
    double geo_log_scale_spread = 1.0;
    int disc_width = 64;
    int disc_layers = 3;
    std::string perceptual = "random_conv";
    uint64_t perceptual_seed = 7;

    int grid() const { return resolution / downsample; }
    int tokens() const { return grid() * grid(); }
    int stages() const {
        int s = 0;
        for (int r = downsample; r > 1; r >>= 1) ++s;
        return s;
    }

    void validate() const {
        if (downsample < 1 || (downsample & (downsample - 1)) != 0)
            throw ConfigError("downsample must be a power of two");
        if (resolution < 1 || resolution % downsample != 0)
            throw ConfigError("resolution must be divisible by downsample");
        if (channels < 1 || base_width < 1 || head_width < 1) throw ConfigError("widths must be >= 1");
        if (res_blocks < 0 || refine_steps < 0) throw ConfigError("res_blocks/refine_steps must be >= 0");
        if (gaussians_per_token < 1) throw ConfigError("gaussians_per_token must be >= 1");
        if (k_vq < 1 || k_geo < 1 || k_feat < 1 || opacity_levels < 1) throw ConfigError("codebook sizes must be >= 1");
        if (!(geo_log_scale_spread > 0.0)) throw ConfigError("geo_log_scale_spread must be positive");
        if (disc_layers < 1 || disc_width < 1) throw ConfigError("discriminator shape must be >= 1");
    }
};

/// Everything a training run needs; a fixed seed makes a run reproducible.
struct TrainConfig {
    ModelConfig model;
    double gamma = 0.1;  // adversarial weight
    double eta = 1.0;    // perceptual weight
    double beta = 0.25;  // commitment weight
    double learning_rate = 1e-4;
    int batch_size = 16;
    int epochs = 10;
    int64_t max_steps = 0; // 0 = no cap
    int64_t adversarial_warmup_steps = 1000;
    double ema_decay = 0.99;
    int64_t stale_threshold = 256; // 0 disables revival
    double grad_clip = 1.0;
    uint64_t seed = 42;
    bool log_wall_time = false;
    int workers = 1;
    int keep_checkpoints = 3; // most recent epoch checkpoints kept; 0 keeps all
    double train_split = 0.9; // train fraction when loading a directory

    void validate() const {
        model.validate();
        if (gamma < 0 || eta < 0 || beta < 0) throw ConfigError("gamma, eta, beta must be >= 0");
        if (learning_rate < 0) throw ConfigError("learning_rate must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 0 || max_steps < 0 || adversarial_warmup_steps < 0 || stale_threshold < 0)
            throw ConfigError("epochs, max_steps, warmup, stale_threshold must be >= 0");
        if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("ema_decay must be in [0, 1]");
        if (workers < 1) throw ConfigError("workers must be >= 1");
        if (keep_checkpoints < 0) throw ConfigError("keep_checkpoints must be >= 0");
        if (!(train_split > 0.0 && train_split <= 1.0)) throw ConfigError("train_split must be in (0, 1]");
    }
};

namespace detail {

template <class N>
N parse_number(const std::string& key, const std::string& v) {
    N out{};
    if constexpr (std::is_floating_point_v<N>) {
        try {
            size_t used = 0;
            out = static_cast<N>(std::stod(v, &used));
            if (used != v.size()) throw std::invalid_argument(v);
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
        }
    } else {
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size())
            throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string format_double(double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
}

struct Field {
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

template <class M>
Field num_field(const std::string& key, M TrainConfig::*member) {
    return {[key, member](TrainConfig& c, const std::string& v) { c.*member = parse_number<M>(key, v); },
            [member](const TrainConfig& c) {
                if constexpr (std::is_floating_point_v<M>) return format_double(c.*member);
                else return std::to_string(c.*member);
            }};
}

template <class M>
Field model_num_field(const std::string& key, M ModelConfig::*member) {
    return {[key, member](TrainConfig& c, const std::string& v) { c.model.*member = parse_number<M>(key, v); },
            [member](const TrainConfig& c) {
                if constexpr (std::is_floating_point_v<M>) return format_double(c.model.*member);
                else return std::to_string(c.model.*member);
            }};
}

inline const std::map<std::string, Field>& fields() {
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> f;
        f["resolution"] = model_num_field("resolution", &ModelConfig::resolution);
        f["downsample"] = model_num_field("downsample", &ModelConfig::downsample);
        f["channels"] = model_num_field("channels", &ModelConfig::channels);
        f["base_width"] = model_num_field("base_width", &ModelConfig::base_width);
        f["res_blocks"] = model_num_field("res_blocks", &ModelConfig::res_blocks);
        f["head_width"] = model_num_field("head_width", &ModelConfig::head_width);
        f["gaussians_per_token"] = model_num_field("gaussians_per_token", &ModelConfig::gaussians_per_token);
        f["refine_steps"] = model_num_field("refine_steps", &ModelConfig::refine_steps);
        f["k_vq"] = model_num_field("k_vq", &ModelConfig::k_vq);
        f["k_geo"] = model_num_field("k_geo", &ModelConfig::k_geo);
        f["k_feat"] = model_num_field("k_feat", &ModelConfig::k_feat);
        f["opacity_levels"] = model_num_field("opacity_levels", &ModelConfig::opacity_levels);
        f["geo_log_scale_center"] = model_num_field("geo_log_scale_center", &ModelConfig::geo_log_scale_center);
        f["geo_log_scale_spread"] = model_num_field("geo_log_scale_spread", &ModelConfig::geo_log_scale_spread);
        f["disc_width"] = model_num_field("disc_width", &ModelConfig::disc_width);
        f["disc_layers"] = model_num_field("disc_layers", &ModelConfig::disc_layers);
        f["perceptual_seed"] = model_num_field("perceptual_seed", &ModelConfig::perceptual_seed);
        f["feature_layout"] = {[](TrainConfig& c, const std::string& v) { c.model.feature_layout = parse_layout(v); },
                               [](const TrainConfig& c) { return std::string(to_string(c.model.feature_layout)); }};
        f["fusion"] = {[](TrainConfig& c, const std::string& v) { c.model.fusion = parse_fusion(v); },
                       [](const TrainConfig& c) { return std::string(to_string(c.model.fusion)); }};
        f["branch"] = {[](TrainConfig& c, const std::string& v) { c.model.branch = parse_branch(v); },
                       [](const TrainConfig& c) { return std::string(to_string(c.model.branch)); }};
        f["quantize"] = {[](TrainConfig& c, const std::string& v) { c.model.quantize = parse_bool("quantize", v); },
                         [](const TrainConfig& c) { return std::string(c.model.quantize ? "true" : "false"); }};
        f["perceptual"] = {[](TrainConfig& c, const std::string& v) { c.model.perceptual = v; },
                           [](const TrainConfig& c) { return c.model.perceptual; }};
        f["gamma"] = num_field("gamma", &TrainConfig::gamma);
        f["eta"] = num_field("eta", &TrainConfig::eta);
        f["beta"] = num_field("beta", &TrainConfig::beta);
        f["learning_rate"] = num_field("learning_rate", &TrainConfig::learning_rate);
        f["batch_size"] = num_field("batch_size", &TrainConfig::batch_size);
        f["epochs"] = num_field("epochs", &TrainConfig::epochs);
        f["max_steps"] = num_field("max_steps", &TrainConfig::max_steps);
        f["adversarial_warmup_steps"] = num_field("adversarial_warmup_steps", &TrainConfig::adversarial_warmup_steps);
        f["ema_decay"] = num_field("ema_decay", &TrainConfig::ema_decay);
        f["stale_threshold"] = num_field("stale_threshold", &TrainConfig::stale_threshold);
        f["grad_clip"] = num_field("grad_clip", &TrainConfig::grad_clip);
        f["seed"] = num_field("seed", &TrainConfig::seed);
        f["workers"] = num_field("workers", &TrainConfig::workers);
        f["keep_checkpoints"] = num_field("keep_checkpoints", &TrainConfig::keep_checkpoints);
        f["train_split"] = num_field("train_split", &TrainConfig::train_split);
        f["log_wall_time"] = {[](TrainConfig& c, const std::string& v) { c.log_wall_time = parse_bool("log_wall_time", v); },
                              [](const TrainConfig& c) { return std::string(c.log_wall_time ? "true" : "false"); }};
        return f;
    }();
    return table;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

/// Applies one `key = value` assignment; unknown keys are rejected.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
    const auto& f = detail::fields();
    const auto it = f.find(key);
    if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(cfg, value);
}

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, _] : detail::fields()) keys.push_back(k);
    return keys;
}

/// Parses flat `key = value` text with `#` comments on top of `base`.
inline TrainConfig parse_config(const std::string& text, TrainConfig base = {}) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
        set_config_value(base, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    base.validate();
    return base;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str());
}

/// Every field, sorted by key; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const TrainConfig& cfg) {
    std::string out;
    for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(cfg) + "\n";
    return out;
}

} // namespace vgq
