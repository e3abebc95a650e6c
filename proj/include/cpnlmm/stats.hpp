#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>
#include <vector>

#include "cpnlmm/common.hpp"

namespace cpnlmm {

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

inline double normal_logpdf(double x, double mean, double sd) {
    const double z = (x - mean) / sd;
    return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * z * z;
}

inline double uniform_logpdf(double x, double lo, double hi) {
    if (x < lo || x > hi) return -std::numeric_limits<double>::infinity();
    return -std::log(hi - lo);
}

// Half-Cauchy on [0, inf): p(x) = 2 / (pi * s * (1 + (x/s)^2)).
inline double half_cauchy_logpdf(double x, double scale) {
    if (x < 0.0) return -std::numeric_limits<double>::infinity();
    const double z = x / scale;
    return std::log(2.0 / M_PI) - std::log(scale) - std::log1p(z * z);
}

inline double log_sum_exp(const std::vector<double>& x) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double acc = 0.0;
    for (double v : x) acc += std::exp(v - m);
    return m + std::log(acc);
}

inline double sample_mean(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v;
    return s / static_cast<double>(x.size());
}

// Unbiased (n-1) sample variance.
inline double sample_variance(const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n < 2) return 0.0;
    const double m = sample_mean(x);
    double s = 0.0;
    for (double v : x) s += (v - m) * (v - m);
    return s / static_cast<double>(n - 1);
}

// Welford accumulator; used for proposal-scale refreshes during warmup.
struct RunningMoments {
    std::size_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void push(double x) {
        ++n;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }
    double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
    void reset() { n = 0; mean = 0.0; m2 = 0.0; }
};

// Hyndman-Fan type 7 quantile (the R default): linear interpolation on
// h = (n-1)p over the order statistics.
inline double quantile_type7(std::vector<double> x, double p) {
    if (x.empty()) throw NumericalError("quantile of empty sample");
    if (p < 0.0 || p > 1.0) throw NumericalError("quantile level outside [0,1]");
    std::sort(x.begin(), x.end());
    const std::size_t n = x.size();
    if (n == 1) return x[0];
    const double h = static_cast<double>(n - 1) * p;
    const std::size_t lo = static_cast<std::size_t>(std::floor(h));
    if (lo + 1 >= n) return x[n - 1];
    const double w = h - static_cast<double>(lo);
    return x[lo] + w * (x[lo + 1] - x[lo]);
}

// Highest posterior density interval: the shortest window covering
// max(1, floor(mass * n)) consecutive sorted draws.
inline std::pair<double, double> hpd_interval(std::vector<double> x, double mass) {
    if (x.empty()) throw NumericalError("hpd of empty sample");
    std::sort(x.begin(), x.end());
    const std::size_t n = x.size();
    const std::size_t m =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(mass * static_cast<double>(n))));
    if (m >= n) return {x.front(), x.back()};
    std::size_t best = 0;
    double best_width = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + m - 1 < n; ++i) {
        const double w = x[i + m - 1] - x[i];
        if (w < best_width) {
            best_width = w;
            best = i;
        }
    }
    return {x[best], x[best + m - 1]};
}

// Wilson score interval for a binomial proportion at 95% coverage.
inline std::pair<double, double> wilson_interval(std::size_t successes, std::size_t trials) {
    if (trials == 0) throw NumericalError("wilson interval with zero trials");
    const double z = 1.959963985;
    const double n = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (p + z2 / (2.0 * n)) / denom;
    const double half = (z / denom) * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

}  // namespace cpnlmm
