#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "digitcast/common.hpp"

namespace digitcast {

enum class SquashMode { kClip, kSigmoid };
enum class ScaleMode { kContextMean, kCausalMean };

/// Converts real values to digit tokens: mean-abs scaling, squashing to
/// [0,1], then fixed-precision base-B digit factorization.
struct TokenizerConfig {
    int precision = 3;        // digits per value
    int base = 10;            // digit radix == model vocabulary size
    double squash_low = 0.0;  // squash bounds (l, h)
    double squash_high = 10.0;
    SquashMode squash_mode = SquashMode::kClip;
    ScaleMode scale_mode = ScaleMode::kContextMean;
    double scale_offset = 1.0;      // r in mu = r + mean|x|
    std::vector<double> msd_bins;   // optional B-1 breakpoints for the most
                                    // significant digit; empty = uniform bins

    void validate() const {
        if (precision < 1) throw ConfigError("tokenizer: precision must be >= 1");
        if (base < 2) throw ConfigError("tokenizer: base must be >= 2");
        if (!(squash_low < squash_high))
            throw ConfigError("tokenizer: squash_low must be < squash_high");
        if (!(scale_offset > 0.0))
            throw ConfigError("tokenizer: scale_offset must be positive");
        if (!msd_bins.empty()) {
            if (static_cast<int>(msd_bins.size()) != base - 1)
                throw ConfigError("tokenizer: msd_bins must have base-1 entries");
            double prev = 0.0;
            for (double b : msd_bins) {
                if (!(b > prev && b < 1.0))
                    throw ConfigError("tokenizer: msd_bins must be strictly ascending inside (0,1)");
                prev = b;
            }
        }
    }
};

/// Per-(series, context) scale factor mu = r + mean|x|.
struct ScalerState {
    double mu = 1.0;
};

struct TokenSeq {
    std::vector<int> tokens;  // each in [0, base)
    int group_size = 0;       // p (or p*d for flattened multivariate input)
};

inline ScalerState fit_scaler(std::span<const double> context, double scale_offset) {
    double sum = 0.0;
    for (double x : context) sum += std::abs(x);
    double mean = context.empty() ? 0.0 : sum / static_cast<double>(context.size());
    return ScalerState{scale_offset + mean};
}

/// Each value divided by r + mean|prefix|, the first by r alone. Prefix
/// means kept as a running sum, so the whole pass is O(T).
inline std::vector<double> causal_scale(std::span<const double> series, double scale_offset) {
    std::vector<double> out(series.size());
    double abs_sum = 0.0;
    for (size_t t = 0; t < series.size(); ++t) {
        double mu = scale_offset + (t == 0 ? 0.0 : abs_sum / static_cast<double>(t));
        out[t] = series[t] / mu;
        abs_sum += std::abs(series[t]);
    }
    return out;
}

inline double squash(double x, const TokenizerConfig& cfg) {
    if (cfg.squash_mode == SquashMode::kSigmoid) return 1.0 / (1.0 + std::exp(-x));
    double u = (x - cfg.squash_low) / (cfg.squash_high - cfg.squash_low);
    return std::clamp(u, 0.0, 1.0);
}

/// Inverse of squash. Sigmoid saturation: u at or beyond {0,1} maps to a
/// logit clamped to +-36.
inline double inverse_squash(double u, const TokenizerConfig& cfg) {
    if (cfg.squash_mode == SquashMode::kSigmoid) {
        if (u <= 0.0) return -36.0;
        if (u >= 1.0) return 36.0;
        return std::clamp(std::log(u / (1.0 - u)), -36.0, 36.0);
    }
    return cfg.squash_low + u * (cfg.squash_high - cfg.squash_low);
}

// floor(u * B^i) is evaluated with this absolute slack so that values meant
// to sit exactly on a bucket boundary (0.123, k/1000, ...) do not fall one
// bucket short after accumulated rounding.
inline constexpr double kFactorizeEps = 0x1p-40;

namespace detail {

// Core digit loop: r <- r/B, d <- min(floor(u/r), B-1), u <- u - d*r,
// writing `count` digits into out[0..count).
inline void factorize_into(double u, int count, int base, int* out) {
    double rem = u;
    double scale = 1.0;
    for (int i = 0; i < count; ++i) {
        scale *= base;
        double d = std::floor(rem * scale + kFactorizeEps);
        int digit = static_cast<int>(std::clamp(d, 0.0, static_cast<double>(base - 1)));
        out[i] = digit;
        rem -= digit / scale;
    }
}

// Bucket [lo, hi) of u under the config's MSD bins; d1 is the bin index.
inline void msd_bucket(const TokenizerConfig& cfg, double u, int& d1, double& lo, double& hi) {
    const auto& bins = cfg.msd_bins;
    d1 = static_cast<int>(std::upper_bound(bins.begin(), bins.end(), u) - bins.begin());
    lo = d1 == 0 ? 0.0 : bins[d1 - 1];
    hi = d1 == cfg.base - 1 ? 1.0 : bins[d1];
}

}  // namespace detail

/// p base-B digits of u in [0,1]; u=1 maps to all-(B-1).
inline std::vector<int> digit_factorize(double u, int precision, int base) {
    std::vector<int> digits(precision);
    detail::factorize_into(std::clamp(u, 0.0, 1.0), precision, base, digits.data());
    return digits;
}

/// Bucket midpoint of the number the digits spell: sum d_k B^-k + B^-p / 2.
inline double digits_to_value(std::span<const int> digits, int precision, int base) {
    if (static_cast<int>(digits.size()) != precision)
        throw ConfigError("digits_to_value: digit count does not match precision");
    double n = 0.0;
    for (int d : digits) {
        if (d < 0 || d >= base) throw ConfigError("digits_to_value: digit out of range [0, base)");
        n = n * base + d;
    }
    return (n + 0.5) / std::pow(static_cast<double>(base), precision);
}

/// Factorization with quantile-remapped most significant digit: the MSD
/// selects an empirical-quantile bucket, the remaining digits subdivide
/// that bucket uniformly. Falls back to digit_factorize without bins.
inline std::vector<int> factorize_value(double u, const TokenizerConfig& cfg) {
    u = std::clamp(u, 0.0, 1.0);
    if (cfg.msd_bins.empty()) return digit_factorize(u, cfg.precision, cfg.base);
    std::vector<int> digits(cfg.precision);
    double lo, hi;
    detail::msd_bucket(cfg, u, digits[0], lo, hi);
    if (cfg.precision > 1) {
        double v = std::clamp((u - lo) / (hi - lo), 0.0, 1.0);
        detail::factorize_into(v, cfg.precision - 1, cfg.base, digits.data() + 1);
    }
    return digits;
}

/// Inverse of factorize_value at bucket midpoints.
inline double value_of_digits(std::span<const int> digits, const TokenizerConfig& cfg) {
    if (cfg.msd_bins.empty()) return digits_to_value(digits, cfg.precision, cfg.base);
    if (static_cast<int>(digits.size()) != cfg.precision)
        throw ConfigError("value_of_digits: digit count does not match precision");
    for (int d : digits) {
        if (d < 0 || d >= cfg.base) throw ConfigError("value_of_digits: digit out of range [0, base)");
    }
    int d1 = digits[0];
    double lo = d1 == 0 ? 0.0 : cfg.msd_bins[d1 - 1];
    double hi = d1 == cfg.base - 1 ? 1.0 : cfg.msd_bins[d1];
    double v = cfg.precision > 1
                   ? digits_to_value(digits.subspan(1), cfg.precision - 1, cfg.base)
                   : 0.5;
    return lo + v * (hi - lo);
}

/// scale -> squash -> factorize per timestep; p tokens per value.
inline std::pair<TokenSeq, ScalerState> tokenize_segment(std::span<const double> segment,
                                                         const TokenizerConfig& cfg) {
    cfg.validate();
    ScalerState scaler = fit_scaler(segment, cfg.scale_offset);
    std::vector<double> scaled;
    if (cfg.scale_mode == ScaleMode::kCausalMean) {
        scaled = causal_scale(segment, cfg.scale_offset);
    } else {
        scaled.resize(segment.size());
        for (size_t t = 0; t < segment.size(); ++t) scaled[t] = segment[t] / scaler.mu;
    }
    TokenSeq seq;
    seq.group_size = cfg.precision;
    seq.tokens.reserve(segment.size() * cfg.precision);
    for (double x : scaled) {
        auto digits = factorize_value(squash(x, cfg), cfg);
        seq.tokens.insert(seq.tokens.end(), digits.begin(), digits.end());
    }
    return {std::move(seq), scaler};
}

/// Per p-token group: digits -> bucket midpoint -> inverse squash -> * mu.
inline std::vector<double> detokenize_segment(std::span<const int> tokens,
                                              const ScalerState& scaler,
                                              const TokenizerConfig& cfg) {
    if (tokens.size() % cfg.precision != 0)
        throw ConfigError("detokenize_segment: token count not divisible by precision");
    size_t n = tokens.size() / cfg.precision;
    std::vector<double> out(n);
    for (size_t i = 0; i < n; ++i) {
        double u = value_of_digits(tokens.subspan(i * cfg.precision, cfg.precision), cfg);
        out[i] = inverse_squash(u, cfg) * scaler.mu;
    }
    return out;
}

/// Empirical (k/B)-quantile breakpoints, k = 1..B-1, of squashed training
/// values; used as msd_bins so each MSD bucket holds a similar share of
/// the data. Each breakpoint is the midpoint of the two order statistics
/// bracketing the rank, so it separates equal-count groups cleanly.
inline std::vector<double> fit_quantile_bins(std::span<const double> values, int base) {
    if (static_cast<int>(values.size()) < base)
        throw ConfigError("fit_quantile_bins: need at least `base` values");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    size_t distinct = 1;
    for (size_t i = 1; i < sorted.size(); ++i)
        if (sorted[i] != sorted[i - 1]) ++distinct;
    if (distinct < static_cast<size_t>(base))
        throw ConfigError(
            "fit_quantile_bins: fewer distinct values than bins; use uniform (non-quantile) mode");
    std::vector<double> breaks(base - 1);
    size_t n = sorted.size();
    for (int k = 1; k < base; ++k) {
        size_t rank = static_cast<size_t>(
            std::ceil(static_cast<double>(k) / base * static_cast<double>(n)));
        breaks[k - 1] = 0.5 * (sorted[rank - 1] + sorted[std::min(rank, n - 1)]);
    }
    for (int k = 0; k < base - 1; ++k) {
        if (!(breaks[k] > 0.0 && breaks[k] < 1.0) || (k > 0 && !(breaks[k] > breaks[k - 1])))
            throw ConfigError(
                "fit_quantile_bins: breakpoints not strictly ascending inside (0,1); "
                "use uniform (non-quantile) mode");
    }
    return breaks;
}

}  // namespace digitcast
