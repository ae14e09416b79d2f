#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "digitcast/common.hpp"

namespace digitcast {

struct ViolationCount {
    int v_hat = 0;
    int windows = 0;
    double alpha = 0.0;
};

/// Counts windows where the ground truth strictly exceeds the predicted
/// alpha-quantile; ties are not violations.
inline ViolationCount count_violations(std::span<const double> quantiles,
                                       std::span<const double> truth, double alpha) {
    if (quantiles.size() != truth.size())
        throw ConfigError("count_violations: quantile/truth length mismatch");
    ViolationCount vc;
    vc.windows = static_cast<int>(truth.size());
    vc.alpha = alpha;
    for (size_t w = 0; w < truth.size(); ++w)
        if (quantiles[w] < truth[w]) ++vc.v_hat;
    return vc;
}

/// Kupiec proportion-of-failures likelihood ratio, computed in log space
/// (the binomial coefficients cancel):
///   T = 2 [ v ln(f/(1-alpha)) + (W-v) ln((1-f)/alpha) ],  f = v/W,
/// with 0 log 0 := 0 at v in {0, W}.
inline double kupiec_statistic(int v_hat, int windows, double alpha) {
    if (windows < 1) throw ConfigError("kupiec_statistic: windows must be >= 1");
    if (v_hat < 0 || v_hat > windows)
        throw ConfigError("kupiec_statistic: v_hat must be in [0, windows]");
    if (!(alpha > 0.0 && alpha < 1.0))
        throw ConfigError("kupiec_statistic: alpha must be in (0,1)");
    double w = static_cast<double>(windows);
    double f = static_cast<double>(v_hat) / w;
    double q = 1.0 - alpha;  // nominal violation rate
    double t = 0.0;
    if (v_hat > 0) t += v_hat * std::log(f / q);
    if (v_hat < windows) t += (windows - v_hat) * std::log((1.0 - f) / alpha);
    t *= 2.0;
    return t < 0.0 ? 0.0 : t;  // clip representation noise; T >= 0 analytically
}

/// Survival function of chi-squared with one degree of freedom:
/// P(X > t) = erfc(sqrt(t/2)).
inline double chi2_sf_1dof(double t) {
    if (t < 0.0) throw ConfigError("chi2_sf_1dof: t must be >= 0");
    return std::erfc(std::sqrt(t / 2.0));
}

/// Per-level backtest results for all (series, horizon) cells.
struct BacktestLevel {
    double alpha = 0.0;
    Mat v_hat;    // S x H
    Mat t_stat;   // S x H
    Mat p_value;  // S x H
};

struct BacktestMatrix {
    std::vector<BacktestLevel> levels;
    int windows = 0;
    double gamma = 0.05;
};

/// Fills T statistics and p-values from a matrix of violation counts.
inline BacktestLevel make_backtest_level(double alpha, const Mat& v_hat, int windows) {
    BacktestLevel lvl;
    lvl.alpha = alpha;
    lvl.v_hat = v_hat;
    lvl.t_stat = Mat(v_hat.rows, v_hat.cols);
    lvl.p_value = Mat(v_hat.rows, v_hat.cols);
    for (int s = 0; s < v_hat.rows; ++s) {
        for (int h = 0; h < v_hat.cols; ++h) {
            double t = kupiec_statistic(static_cast<int>(v_hat(s, h)), windows, alpha);
            lvl.t_stat(s, h) = t;
            lvl.p_value(s, h) = chi2_sf_1dof(t);
        }
    }
    return lvl;
}

/// Fraction of (series, horizon) cells whose p-value is at least gamma.
inline double pvalue_fraction(const BacktestMatrix& matrix, double alpha, double gamma) {
    for (const auto& lvl : matrix.levels) {
        if (std::abs(lvl.alpha - alpha) < 1e-12) {
            long pass = 0, total = 0;
            for (double p : lvl.p_value.v) {
                if (p >= gamma) ++pass;
                ++total;
            }
            if (total == 0) throw ConfigError("pvalue_fraction: empty level matrix");
            return static_cast<double>(pass) / static_cast<double>(total);
        }
    }
    throw ConfigError("pvalue_fraction: level not present in backtest matrix");
}

}  // namespace digitcast
