// Copyright Contributors to the VGQ Project
// SPDX-License-Identifier: Apache-2.0
//
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "vgq/errors.hpp"
#include "vgq/param.hpp"

namespace vgq {

/// Staleness threshold that disables dead-entry revival.
inline constexpr int64_t kNeverRevive = std::numeric_limits<int64_t>::max();
inline constexpr double kLaplaceEpsilon = 1e-5;
inline constexpr double kReviveNoiseSigma = 0.01;

/// K x d table of code vectors with EMA bookkeeping.
///
/// Entries are moved by the direct rule e <- m e + (1 - m) mean(assigned);
/// `ema_count`/`ema_sum` keep the usual decayed accumulators so the smoothed
/// cluster statistics are available (and checkpointed) alongside.
template <class T>
class Codebook {
public:
    Codebook() = default;
    Codebook(int size, int dim, T decay = T(0.99)) : size_(size), dim_(dim), decay_(decay) {
        require(size >= 1 && dim >= 1, "Codebook: K and d must be >= 1");
        require(decay >= T(0) && decay <= T(1), "Codebook: decay must be in [0, 1]");
        entries_.assign(static_cast<size_t>(size) * dim, T(0));
        ema_count_.assign(size, T(0));
        ema_sum_.assign(static_cast<size_t>(size) * dim, T(0));
        hit_count_.assign(size, 0);
        idle_steps_.assign(size, 0);
    }

    int size() const { return size_; }
    int dim() const { return dim_; }
    T decay() const { return decay_; }
    void set_decay(T m) { decay_ = m; }

    std::span<T> entry(int j) { return {entries_.data() + static_cast<size_t>(j) * dim_, static_cast<size_t>(dim_)}; }
    std::span<const T> entry(int j) const {
        return {entries_.data() + static_cast<size_t>(j) * dim_, static_cast<size_t>(dim_)};
    }

    std::vector<T>& entries() { return entries_; }
    const std::vector<T>& entries() const { return entries_; }
    std::vector<T>& ema_count() { return ema_count_; }
    const std::vector<T>& ema_count() const { return ema_count_; }
    std::vector<T>& ema_sum() { return ema_sum_; }
    const std::vector<T>& ema_sum() const { return ema_sum_; }
    std::vector<int64_t>& hit_count() { return hit_count_; }
    const std::vector<int64_t>& hit_count() const { return hit_count_; }
    std::vector<int64_t>& idle_steps() { return idle_steps_; }
    const std::vector<int64_t>& idle_steps() const { return idle_steps_; }

    /// Optional per-dimension box applied after every update; geometry codes
    /// keep positions and normalized angles inside [0, 1].
    void set_bounds(std::vector<T> lower, std::vector<T> upper) {
        require(lower.size() == static_cast<size_t>(dim_) && upper.size() == static_cast<size_t>(dim_),
                "Codebook::set_bounds: width mismatch");
        lower_ = std::move(lower);
        upper_ = std::move(upper);
    }
    bool bounded() const { return !lower_.empty(); }

    void project(int j) {
        if (lower_.empty()) return;
        auto e = entry(j);
        for (int i = 0; i < dim_; ++i) e[i] = std::clamp(e[i], lower_[i], upper_[i]);
    }

    /// Smoothed cluster sizes n_j = (c_j + eps) / (sum c + K eps) * sum c.
    std::vector<T> smoothed_counts() const {
        double total = 0.0;
        for (T c : ema_count_) total += c;
        std::vector<T> out(size_);
        for (int j = 0; j < size_; ++j)
            out[j] = static_cast<T>((ema_count_[j] + kLaplaceEpsilon) / (total + size_ * kLaplaceEpsilon) * total);
        return out;
    }

    /// Initialize entries from vectors sampled uniformly (with replacement
    /// when K exceeds the pool), seeded.
    void init_from(std::span<const T> vectors, Rng& rng) {
        require(!vectors.empty() && vectors.size() % dim_ == 0, "Codebook::init_from: bad vector pool");
        const size_t n = vectors.size() / dim_;
        std::uniform_int_distribution<size_t> pick(0, n - 1);
        std::normal_distribution<double> noise(0.0, kReviveNoiseSigma);
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        for (int j = 0; j < size_; ++j) {
            const bool fresh = static_cast<size_t>(j) < n;
            const size_t src = fresh ? order[j] : pick(rng);
            auto e = entry(j);
            for (int i = 0; i < dim_; ++i)
                e[i] = vectors[src * dim_ + i] + (fresh ? T(0) : static_cast<T>(noise(rng)));
            project(j);
        }
        std::fill(ema_count_.begin(), ema_count_.end(), T(0));
        std::fill(ema_sum_.begin(), ema_sum_.end(), T(0));
        std::fill(hit_count_.begin(), hit_count_.end(), 0);
        std::fill(idle_steps_.begin(), idle_steps_.end(), 0);
        initialized_ = true;
    }

    bool initialized() const { return initialized_; }
    void mark_initialized(bool v = true) { initialized_ = v; }

private:
    int size_ = 0;
    int dim_ = 0;
    T decay_ = T(0.99);
    bool initialized_ = false;
    std::vector<T> entries_;
    std::vector<T> ema_count_;
    std::vector<T> ema_sum_;
    std::vector<int64_t> hit_count_;
    std::vector<int64_t> idle_steps_;
    std::vector<T> lower_, upper_;
};

template <class T>
struct QuantizationResult {
    std::vector<int> indices;
    std::vector<T> quantized; // N x d, row-major
    T commitment_loss = T(0);
};

/// Lowest index attaining the minimum.
template <class D>
int tie_break(std::span<const D> distances) {
    require(!distances.empty(), "tie_break: empty distance list");
    int best = 0;
    for (size_t j = 1; j < distances.size(); ++j)
        if (distances[j] < distances[best]) best = static_cast<int>(j);
    return best;
}

/// Exact nearest entry under squared Euclidean distance, accumulated in
/// double; exact ties resolve to the smallest index.
template <class T>
int nearest_entry(const Codebook<T>& cb, std::span<const T> v) {
    const int d = cb.dim();
    const T* e = cb.entries().data();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < cb.size(); ++j, e += d) {
        double s = 0.0;
        for (int i = 0; i < d; ++i) {
            const double diff = static_cast<double>(v[i]) - static_cast<double>(e[i]);
            s += diff * diff;
        }
        if (s < best_d) {
            best_d = s;
            best = j;
        }
    }
    return best;
}

/// Nearest-neighbour quantization of N row vectors with the beta-weighted
/// commitment term beta * mean_i ||v_i - sg(q_i)||^2.
template <class T>
QuantizationResult<T> quantize_nn(std::span<const T> vectors, const Codebook<T>& cb, T beta = T(0.25)) {
    const int d = cb.dim();
    if (vectors.size() % d != 0) throw ContractError("quantize_nn: vector width does not match codebook dimension");
    const size_t n = vectors.size() / d;
    QuantizationResult<T> r;
    r.indices.resize(n);
    r.quantized.resize(vectors.size());
    double commit = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const auto v = vectors.subspan(i * d, d);
        const int j = nearest_entry(cb, v);
        r.indices[i] = j;
        const auto e = cb.entry(j);
        for (int k = 0; k < d; ++k) {
            r.quantized[i * d + k] = e[k];
            const double diff = static_cast<double>(v[k]) - e[k];
            commit += diff * diff;
        }
    }
    r.commitment_loss = n ? static_cast<T>(beta * commit / static_cast<double>(n)) : T(0);
    return r;
}

/// d commitment / d v = 2 beta (v - q) / N, added into `grad`.
template <class T>
void commitment_backward(std::span<const T> vectors, std::span<const T> quantized, int dim, T beta, T scale,
                         std::span<T> grad) {
    const size_t n = vectors.size() / dim;
    if (n == 0) return;
    const T k = T(2) * beta * scale / static_cast<T>(n);
    for (size_t i = 0; i < vectors.size(); ++i) grad[i] += k * (vectors[i] - quantized[i]);
}

/// Straight-through estimator. The forward value is `quantized` (copied, not
/// recomputed as raw + (q - raw)); the backward hands the upstream cotangent
/// to `raw` unchanged and nothing to `quantized`.
template <class T>
struct StraightThrough {
    static std::vector<T> forward(std::span<const T> raw, std::span<const T> quantized) {
        require(raw.size() == quantized.size(), "straight_through: shape mismatch");
        return {quantized.begin(), quantized.end()};
    }
    static std::vector<T> backward_raw(std::span<const T> upstream) { return {upstream.begin(), upstream.end()}; }
    static std::vector<T> backward_quantized(std::span<const T> upstream) {
        return std::vector<T>(upstream.size(), T(0));
    }
};

/// One EMA step. Assigned entries move to m e + (1 - m) mean(assigned);
/// unassigned entries are left bitwise untouched.
template <class T>
void ema_update(Codebook<T>& cb, std::span<const int> indices, std::span<const T> vectors, std::optional<T> decay = {}) {
    const int K = cb.size(), d = cb.dim();
    require(vectors.size() == indices.size() * static_cast<size_t>(d), "ema_update: indices/vectors mismatch");
    const double m = static_cast<double>(decay.value_or(cb.decay()));
    std::vector<double> count(K, 0.0), sum(static_cast<size_t>(K) * d, 0.0);
    for (size_t i = 0; i < indices.size(); ++i) {
        const int j = indices[i];
        require(j >= 0 && j < K, "ema_update: index out of range");
        count[j] += 1.0;
        for (int k = 0; k < d; ++k) sum[static_cast<size_t>(j) * d + k] += vectors[i * d + k];
    }
    for (int j = 0; j < K; ++j) {
        cb.ema_count()[j] = static_cast<T>(m * cb.ema_count()[j] + (1.0 - m) * count[j]);
        for (int k = 0; k < d; ++k) {
            auto& s = cb.ema_sum()[static_cast<size_t>(j) * d + k];
            s = static_cast<T>(m * s + (1.0 - m) * sum[static_cast<size_t>(j) * d + k]);
        }
        if (count[j] == 0.0) {
            ++cb.idle_steps()[j];
            continue;
        }
        cb.idle_steps()[j] = 0;
        cb.hit_count()[j] += static_cast<int64_t>(count[j]);
        if (m == 1.0) continue;
        auto e = cb.entry(j);
        for (int k = 0; k < d; ++k) {
            const double mean = sum[static_cast<size_t>(j) * d + k] / count[j];
            e[k] = static_cast<T>(m * e[k] + (1.0 - m) * mean);
        }
        cb.project(j);
    }
}

/// Overwrites entries idle for >= stale_threshold updates with a random
/// candidate plus N(0, 0.01^2) noise. Returns the number revived.
template <class T>
int reinit_dead_entries(Codebook<T>& cb, std::span<const T> candidates, int64_t stale_threshold, Rng& rng) {
    const int d = cb.dim();
    require(!candidates.empty() && candidates.size() % d == 0, "reinit_dead_entries: empty candidate pool");
    if (stale_threshold == kNeverRevive) return 0;
    const size_t n = candidates.size() / d;
    std::uniform_int_distribution<size_t> pick(0, n - 1);
    std::normal_distribution<double> noise(0.0, kReviveNoiseSigma);
    int revived = 0;
    for (int j = 0; j < cb.size(); ++j) {
        if (cb.idle_steps()[j] < stale_threshold) continue;
        const size_t src = pick(rng);
        auto e = cb.entry(j);
        for (int k = 0; k < d; ++k) e[k] = candidates[src * d + k] + static_cast<T>(noise(rng));
        cb.project(j);
        cb.idle_steps()[j] = 0;
        cb.ema_count()[j] = T(0);
        for (int k = 0; k < d; ++k) cb.ema_sum()[static_cast<size_t>(j) * d + k] = T(0);
        ++revived;
    }
    return revived;
}

/// Set of entries selected at least once over an evaluation window.
class UsageWindow {
public:
    explicit UsageWindow(int size = 0) : used_(size, false) {}

    void record(std::span<const int> indices) {
        for (int j : indices) {
            require(j >= 0 && j < static_cast<int>(used_.size()), "UsageWindow: index out of range");
            if (!used_[j]) {
                used_[j] = true;
                ++distinct_;
            }
            ++observations_;
        }
    }
    int distinct() const { return distinct_; }
    int64_t observations() const { return observations_; }
    int size() const { return static_cast<int>(used_.size()); }

private:
    std::vector<bool> used_;
    int distinct_ = 0;
    int64_t observations_ = 0;
};

/// |{j assigned within the window}| / K.
inline double utilization(const UsageWindow& window) {
    require(window.size() > 0, "utilization: empty codebook");
    return static_cast<double>(window.distinct()) / window.size();
}

template <class T>
double utilization(const Codebook<T>& cb, const UsageWindow& window) {
    require(window.size() == cb.size(), "utilization: window/codebook size mismatch");
    return utilization(window);
}

} // namespace vgq
