#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "digitcast/common.hpp"
#include "digitcast/model.hpp"
#include "digitcast/rng.hpp"
#include "digitcast/tokenizer.hpp"

namespace digitcast {

/// I independently simulated trajectories of H future values for one
/// (series, window).
struct ForecastEnsemble {
    Mat samples;  // I x H
    ScalerState scaler;
    int series = 0;
    int window = 0;

    int simulations() const { return samples.rows; }
    int horizon() const { return samples.cols; }
};

/// Multinomial draw at temperature 1; no truncation.
inline int sample_digit(std::span<const double> probabilities, Rng& rng) {
    if (probabilities.empty()) throw ConfigError("sample_digit: empty probability vector");
    double total = 0.0;
    for (double p : probabilities) {
        if (!(p >= 0.0)) throw ConfigError("sample_digit: negative probability");
        total += p;
    }
    if (!(total > 0.0)) throw ConfigError("sample_digit: probabilities sum to zero");
    double u = uniform_real(rng) * total;
    double acc = 0.0;
    for (size_t i = 0; i + 1 < probabilities.size(); ++i) {
        acc += probabilities[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probabilities.size()) - 1;
}

inline constexpr uint64_t kTrajectoryStreamTag = 0x7a17ULL;

namespace detail {

inline std::vector<double> softmax_row(const double* row, int n) {
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    std::vector<double> p(n);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
        p[j] = std::exp(row[j] - mx);
        z += p[j];
    }
    for (double& x : p) x /= z;
    return p;
}

}  // namespace detail

/// One autoregressive trajectory: appends H values to the context, sampling
/// the p digits of each value sequentially, each digit conditioned on every
/// token so far. When the token window would overflow max_seq_len, the
/// oldest raw timestep is dropped.
inline std::vector<double> simulate_one(const Parameters& params, std::span<const double> context,
                                        int horizon, const TokenizerConfig& tok_cfg, Rng& rng) {
    const ModelConfig& mcfg = params.config;
    int p = tok_cfg.precision;
    if (static_cast<long>(context.size()) * p > mcfg.max_seq_len)
        throw ConfigError("simulate: context alone exceeds max_seq_len (" +
                          std::to_string(context.size() * p) + " tokens)");

    auto [seq, scaler] = tokenize_segment(context, tok_cfg);
    std::vector<int> tokens = std::move(seq.tokens);
    bool causal = tok_cfg.scale_mode == ScaleMode::kCausalMean;
    double abs_sum = 0.0;
    size_t raw_count = context.size();
    if (causal)
        for (double x : context) abs_sum += std::abs(x);

    ForwardCache cache;
    std::vector<double> out(horizon);
    std::vector<int> digits(p);
    for (int h = 0; h < horizon; ++h) {
        while (static_cast<long>(tokens.size()) + p > mcfg.max_seq_len)
            tokens.erase(tokens.begin(), tokens.begin() + p);
        for (int d = 0; d < p; ++d) {
            const Mat& logits = forward(params, tokens, false, nullptr, cache);
            auto probs = detail::softmax_row(logits.row(logits.rows - 1), logits.cols);
            digits[d] = sample_digit(probs, rng);
            tokens.push_back(digits[d]);
        }
        double u = value_of_digits(digits, tok_cfg);
        double mu = causal ? tok_cfg.scale_offset + abs_sum / static_cast<double>(raw_count)
                           : scaler.mu;
        double value = inverse_squash(u, tok_cfg) * mu;
        out[h] = value;
        if (causal) {
            abs_sum += std::abs(value);
            raw_count += 1;
        }
    }
    return out;
}

/// Monte Carlo ensemble: I trajectories with counter-derived substreams
/// (seed, trajectory index), so results are independent of scheduling.
/// The scaler is fit on the context only and frozen for the horizon.
inline ForecastEnsemble simulate(const Parameters& params, std::span<const double> context,
                                 int horizon, int simulations, const TokenizerConfig& tok_cfg,
                                 uint64_t seed, int jobs = 0) {
    if (horizon < 1 || simulations < 1)
        throw ConfigError("simulate: horizon and simulations must be positive");
    ForecastEnsemble ens;
    ens.samples = Mat(simulations, horizon);
    ens.scaler = fit_scaler(context, tok_cfg.scale_offset);
    parallel_for(static_cast<size_t>(simulations), jobs, [&](size_t i) {
        Rng rng = substream(seed, kTrajectoryStreamTag, static_cast<uint64_t>(i));
        auto traj = simulate_one(params, context, horizon, tok_cfg, rng);
        std::copy(traj.begin(), traj.end(), ens.samples.row(static_cast<int>(i)));
    });
    return ens;
}

/// Lower empirical quantile of a sorted sample: order statistic at rank
/// ceil(alpha * n).
inline double empirical_quantile_sorted(std::span<const double> sorted, double alpha) {
    if (sorted.empty()) throw ConfigError("empirical_quantile: empty sample");
    if (!(alpha > 0.0 && alpha < 1.0))
        throw ConfigError("empirical_quantile: alpha must be in (0,1)");
    size_t rank = static_cast<size_t>(std::ceil(alpha * static_cast<double>(sorted.size())));
    rank = std::max<size_t>(rank, 1);
    return sorted[rank - 1];
}

/// Empirical alpha-quantile of horizon step h (1-based).
inline double empirical_quantile(const ForecastEnsemble& ens, double alpha, int h) {
    if (ens.samples.rows == 0) throw ConfigError("empirical_quantile: empty ensemble");
    if (h < 1 || h > ens.horizon()) throw ConfigError("empirical_quantile: h out of range");
    std::vector<double> col(ens.samples.rows);
    for (int i = 0; i < ens.samples.rows; ++i) col[i] = ens.samples(i, h - 1);
    std::sort(col.begin(), col.end());
    return empirical_quantile_sorted(col, alpha);
}

/// Arithmetic mean of horizon step h (1-based).
inline double ensemble_mean(const ForecastEnsemble& ens, int h) {
    if (ens.samples.rows == 0) throw ConfigError("ensemble_mean: empty ensemble");
    if (h < 1 || h > ens.horizon()) throw ConfigError("ensemble_mean: h out of range");
    double sum = 0.0;
    for (int i = 0; i < ens.samples.rows; ++i) sum += ens.samples(i, h - 1);
    return sum / ens.samples.rows;
}

}  // namespace digitcast
