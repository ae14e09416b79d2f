#include <gtest/gtest.h>

#include <cmath>

#include "digitcast/backtest.hpp"
#include "digitcast/rng.hpp"

using namespace digitcast;

namespace {

// Full binomial log-pmf via lgamma; the coefficients cancel in the ratio,
// so this is an independent route to the Kupiec statistic.
double log_binom_pmf(int k, double p, int n) {
    double coef = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
    double a = k == 0 ? 0.0 : k * std::log(p);
    double b = k == n ? 0.0 : (n - k) * std::log(1.0 - p);
    return coef + a + b;
}

double direct_kupiec(int v, int w, double alpha) {
    double f = static_cast<double>(v) / w;
    return 2.0 * (log_binom_pmf(v, f, w) - log_binom_pmf(v, 1.0 - alpha, w));
}

// Numerical tail integral of the chi2(1) density, independent of erfc.
double chi2_sf_by_quadrature(double t) {
    auto density = [](double x) { return std::exp(-0.5 * x) / std::sqrt(2.0 * M_PI * x); };
    double upper = std::max(t + 60.0, 80.0);
    const int steps = 4000000;
    double h = (upper - t) / steps;
    double sum = 0.5 * (density(t) + density(upper));
    for (int i = 1; i < steps; ++i) sum += density(t + i * h);
    return sum * h;
}

}  // namespace

TEST(CountViolations, Extremes) {
    std::vector<double> truth = {1.0, 2.0, 3.0, 4.0};
    std::vector<double> above = {5.0, 5.0, 5.0, 5.0};
    std::vector<double> below = {0.0, 0.0, 0.0, 0.0};
    EXPECT_EQ(count_violations(above, truth, 0.95).v_hat, 0);
    EXPECT_EQ(count_violations(below, truth, 0.95).v_hat, 4);
}

TEST(CountViolations, TiesAreNotViolations) {
    std::vector<double> truth = {2.0, 3.0};
    std::vector<double> q = {2.0, 3.0};
    EXPECT_EQ(count_violations(q, truth, 0.5).v_hat, 0);
}

TEST(CountViolations, LengthMismatchRejected) {
    std::vector<double> truth = {1.0};
    std::vector<double> q = {1.0, 2.0};
    EXPECT_THROW(count_violations(q, truth, 0.5), ConfigError);
}

TEST(KupiecStatistic, NominalRateGivesZero) {
    EXPECT_NEAR(kupiec_statistic(5, 100, 0.95), 0.0, 1e-12);
}

TEST(KupiecStatistic, ZeroViolationsClosedForm) {
    EXPECT_NEAR(kupiec_statistic(0, 100, 0.95), -200.0 * std::log(0.95), 1e-9);
}

TEST(KupiecStatistic, TenViolationsClosedForm) {
    double expected = 2.0 * (10.0 * std::log(2.0) + 90.0 * std::log(0.90 / 0.95));
    EXPECT_NEAR(kupiec_statistic(10, 100, 0.95), expected, 1e-12);
    EXPECT_NEAR(expected, 4.131, 5e-4);
}

TEST(KupiecStatistic, RejectsDegenerateArguments) {
    EXPECT_THROW(kupiec_statistic(5, 100, 0.0), ConfigError);
    EXPECT_THROW(kupiec_statistic(5, 100, 1.0), ConfigError);
    EXPECT_THROW(kupiec_statistic(-1, 100, 0.95), ConfigError);
    EXPECT_THROW(kupiec_statistic(101, 100, 0.95), ConfigError);
}

TEST(KupiecStatistic, AgreesWithDirectBinomialRatio) {
    for (double alpha : {0.5, 0.75, 0.95}) {
        for (int v = 0; v <= 100; ++v) {
            double direct = std::max(direct_kupiec(v, 100, alpha), 0.0);
            EXPECT_NEAR(kupiec_statistic(v, 100, alpha), direct, 1e-9)
                << "v=" << v << " alpha=" << alpha;
        }
    }
}

TEST(KupiecStatistic, MinimizedAtNominalAndMonotoneAway) {
    // W chosen so W*(1-alpha) is attainable: 100 * 0.25 = 25
    double alpha = 0.75;
    int w = 100;
    EXPECT_NEAR(kupiec_statistic(25, w, alpha), 0.0, 1e-12);
    for (int v = 26; v <= w; ++v)
        EXPECT_GT(kupiec_statistic(v, w, alpha), kupiec_statistic(v - 1, w, alpha));
    for (int v = 24; v >= 0; --v)
        EXPECT_GT(kupiec_statistic(v, w, alpha), kupiec_statistic(v + 1, w, alpha));
}

TEST(Chi2Sf, ReferencePoints) {
    EXPECT_DOUBLE_EQ(chi2_sf_1dof(0.0), 1.0);
    EXPECT_NEAR(chi2_sf_1dof(3.8415), 0.0500, 1e-4);
    EXPECT_NEAR(chi2_sf_1dof(-200.0 * std::log(0.95)), 0.00136, 5e-6);
    EXPECT_THROW(chi2_sf_1dof(-0.1), ConfigError);
}

TEST(Chi2Sf, MatchesQuadratureOracle) {
    for (double t : {0.5, 1.0, 2.0, 3.8415, 6.635, 10.2587}) {
        EXPECT_NEAR(chi2_sf_1dof(t), chi2_sf_by_quadrature(t), 1e-8) << "t=" << t;
    }
}

TEST(Chi2Sf, FivePercentCriticalValueByRootFinding) {
    // bisect the quadrature oracle for the 5% critical value
    double lo = 3.0, hi = 5.0;
    for (int it = 0; it < 60; ++it) {
        double mid = 0.5 * (lo + hi);
        if (chi2_sf_by_quadrature(mid) > 0.05)
            lo = mid;
        else
            hi = mid;
    }
    EXPECT_NEAR(0.5 * (lo + hi), 3.8415, 1e-3);
    EXPECT_NEAR(chi2_sf_1dof(0.5 * (lo + hi)), 0.05, 1e-6);
}

TEST(PvalueFraction, AllZeroStatisticsPass) {
    Mat v(3, 4);
    for (auto& x : v.v) x = 25.0;  // nominal for alpha=0.75, W=100
    BacktestMatrix m;
    m.windows = 100;
    m.levels.push_back(make_backtest_level(0.75, v, 100));
    EXPECT_DOUBLE_EQ(pvalue_fraction(m, 0.75, 0.05), 1.0);
}

TEST(PvalueFraction, ZeroViolationsAtNinetyFiveAllFail) {
    Mat v(2, 5);  // all cells v_hat = 0
    BacktestMatrix m;
    m.windows = 100;
    m.levels.push_back(make_backtest_level(0.95, v, 100));
    // p ~ 0.00136 < 0.05 for every cell
    EXPECT_DOUBLE_EQ(pvalue_fraction(m, 0.95, 0.05), 0.0);
    EXPECT_THROW(pvalue_fraction(m, 0.5, 0.05), ConfigError);
}

TEST(PvalueFraction, GammaMonotonicity) {
    Rng rng = substream(61, 0);
    Mat v(10, 10);
    for (auto& x : v.v) {
        int count = 0;
        for (int w = 0; w < 100; ++w) count += uniform_real(rng) < 0.05 ? 1 : 0;
        x = count;
    }
    BacktestMatrix m;
    m.windows = 100;
    m.levels.push_back(make_backtest_level(0.95, v, 100));
    double prev = 1.0;
    for (double gamma : {0.01, 0.05, 0.10, 0.25}) {
        double frac = pvalue_fraction(m, 0.95, gamma);
        EXPECT_LE(frac, prev + 1e-12);
        prev = frac;
    }
}

// Acceptance criterion 9 tail: simulated null rejection rate stays near the
// significance level.
TEST(PvalueFraction, SimulatedNullRejectionRate) {
    Rng rng = substream(62, 0);
    const int cells = 10000, w = 100;
    double alpha = 0.95, gamma = 0.05;
    Mat v(100, 100);
    for (auto& x : v.v) {
        int count = 0;
        for (int i = 0; i < w; ++i) count += uniform_real(rng) < (1.0 - alpha) ? 1 : 0;
        x = count;
    }
    BacktestMatrix m;
    m.windows = w;
    m.levels.push_back(make_backtest_level(alpha, v, w));
    double fraction = pvalue_fraction(m, alpha, gamma);
    double rejection = 1.0 - fraction;
    EXPECT_LE(rejection, gamma + 0.02) << "cells=" << cells;
    EXPECT_NEAR(fraction, 0.95, 0.02);
}
