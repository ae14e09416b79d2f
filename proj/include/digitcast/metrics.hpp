#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "digitcast/common.hpp"
#include "digitcast/rng.hpp"
#include "digitcast/sampler.hpp"

namespace digitcast {

/// One (window, series) metric value.
struct MetricCell {
    int window = 0;
    int series = 0;
    std::string metric;
    double value = 0.0;
};

/// IQM point estimate with a 90% bootstrap confidence interval.
struct MetricSummary {
    std::string metric;
    double iqm = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    long cells = 0;
};

/// Mean absolute value of the ground truth over the training window;
/// normalizes every metric for series s in window w. A zero return (an
/// all-zero window) marks the cell as non-aggregatable.
inline double normalizer_F(std::span<const double> training_window) {
    if (training_window.empty()) throw ConfigError("normalizer_F: empty training window");
    double sum = 0.0;
    for (double x : training_window) sum += std::abs(x);
    return sum / static_cast<double>(training_window.size());
}

namespace detail {

inline void check_metric_inputs(const ForecastEnsemble& ens, std::span<const double> truth,
                                double f) {
    if (static_cast<int>(truth.size()) != ens.horizon())
        throw ConfigError("metric: truth length does not match ensemble horizon");
    if (!(f > 0.0)) throw ConfigError("metric: normalizer F must be positive");
}

}  // namespace detail

/// MAD(w,s) = (1/H)(1/F) sum_h |mean_i prediction - truth|.
inline double mad(const ForecastEnsemble& ens, std::span<const double> truth, double f) {
    detail::check_metric_inputs(ens, truth, f);
    double sum = 0.0;
    for (int h = 1; h <= ens.horizon(); ++h) sum += std::abs(ensemble_mean(ens, h) - truth[h - 1]);
    return sum / (static_cast<double>(ens.horizon()) * f);
}

/// RMSE(w,s) = (1/F) sqrt((1/H) sum_h (mean_i prediction - truth)^2).
inline double rmse(const ForecastEnsemble& ens, std::span<const double> truth, double f) {
    detail::check_metric_inputs(ens, truth, f);
    double sum = 0.0;
    for (int h = 1; h <= ens.horizon(); ++h) {
        double e = ensemble_mean(ens, h) - truth[h - 1];
        sum += e * e;
    }
    return std::sqrt(sum / static_cast<double>(ens.horizon())) / f;
}

/// QL_alpha(w,s) = (2/H)(1/F) sum_h (alpha - 1{Delta<=0}) Delta, with
/// Delta = truth - predicted alpha-quantile.
inline double quantile_loss(std::span<const double> quantiles, std::span<const double> truth,
                            double alpha, double f) {
    if (quantiles.size() != truth.size())
        throw ConfigError("quantile_loss: quantile/truth length mismatch");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("quantile_loss: alpha must be in (0,1)");
    if (!(f > 0.0)) throw ConfigError("quantile_loss: normalizer F must be positive");
    double sum = 0.0;
    for (size_t h = 0; h < truth.size(); ++h) {
        double delta = truth[h] - quantiles[h];
        double indicator = delta <= 0.0 ? 1.0 : 0.0;
        sum += (alpha - indicator) * delta;
    }
    return 2.0 * sum / (static_cast<double>(truth.size()) * f);
}

/// CRPS(w,s) = (1/M) sum_m QL_{m/(M+1)}, empirical quantiles per level.
inline double crps(const ForecastEnsemble& ens, std::span<const double> truth, double f,
                   int m_levels = 20) {
    if (m_levels < 1) throw ConfigError("crps: M must be >= 1");
    detail::check_metric_inputs(ens, truth, f);
    int horizon = ens.horizon();
    std::vector<double> q(horizon);
    double sum = 0.0;
    for (int m = 1; m <= m_levels; ++m) {
        double alpha = static_cast<double>(m) / (m_levels + 1);
        for (int h = 1; h <= horizon; ++h) q[h - 1] = empirical_quantile(ens, alpha, h);
        sum += quantile_loss(q, truth, alpha, f);
    }
    return sum / m_levels;
}

/// Interquartile mean: drop floor(n/4) values from each end, average the
/// rest.
inline double iqm(std::span<const double> values) {
    if (values.empty()) throw ConfigError("iqm: no values");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    size_t drop = sorted.size() / 4;
    double sum = 0.0;
    for (size_t i = drop; i < sorted.size() - drop; ++i) sum += sorted[i];
    return sum / static_cast<double>(sorted.size() - 2 * drop);
}

/// Percentile bootstrap of the IQM statistic over cells.
inline std::pair<double, double> bootstrap_ci(std::span<const double> values, double level,
                                              int resamples, Rng& rng) {
    if (values.size() < 2) throw ConfigError("bootstrap_ci: need at least 2 values");
    if (!(level > 0.0 && level < 1.0)) throw ConfigError("bootstrap_ci: level must be in (0,1)");
    if (resamples < 2) throw ConfigError("bootstrap_ci: resamples must be >= 2");
    size_t n = values.size();
    std::vector<double> sample(n);
    std::vector<double> stats(resamples);
    for (int r = 0; r < resamples; ++r) {
        for (size_t i = 0; i < n; ++i)
            sample[i] = values[uniform_int(rng, 0, static_cast<int64_t>(n) - 1)];
        stats[r] = iqm(sample);
    }
    std::sort(stats.begin(), stats.end());
    double tail = (1.0 - level) / 2.0;
    return {empirical_quantile_sorted(stats, tail), empirical_quantile_sorted(stats, 1.0 - tail)};
}

/// IQM + 90% bootstrap CI per metric name over a cell table. Cells flagged
/// non-aggregatable (zero normalizer) must already be excluded.
inline std::vector<MetricSummary> summarize_cells(const std::vector<MetricCell>& cells,
                                                  double level, int resamples, uint64_t seed) {
    std::vector<std::string> names;
    for (const auto& c : cells)
        if (std::find(names.begin(), names.end(), c.metric) == names.end())
            names.push_back(c.metric);
    std::vector<MetricSummary> out;
    for (const auto& name : names) {
        std::vector<double> vals;
        for (const auto& c : cells)
            if (c.metric == name) vals.push_back(c.value);
        MetricSummary s;
        s.metric = name;
        s.cells = static_cast<long>(vals.size());
        s.iqm = iqm(vals);
        if (vals.size() >= 2) {
            Rng rng = substream(seed, 0xb007ULL, std::hash<std::string>{}(name));
            auto [lo, hi] = bootstrap_ci(vals, level, resamples, rng);
            s.ci_low = lo;
            s.ci_high = hi;
        } else {
            s.ci_low = s.ci_high = s.iqm;
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace digitcast
