#pragma once

// Reference implementations the tests freeze expected values against.
// Written from textbook formulas on purpose; none of them call into the
// code paths they are used to check.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "cpnlmm/rng.hpp"

namespace oracle {

// Classic RK4 on y' = -r(t) * y from (t0, y0) to t1.
inline double rk4_decay(const std::function<double(double)>& r, double t0, double y0,
                        double t1, double h) {
    double t = t0, y = y0;
    auto f = [&](double tt, double yy) { return -r(tt) * yy; };
    while (t < t1) {
        const double step = std::min(h, t1 - t);
        const double k1 = f(t, y);
        const double k2 = f(t + step / 2.0, y + step / 2.0 * k1);
        const double k3 = f(t + step / 2.0, y + step / 2.0 * k2);
        const double k4 = f(t + step, y + step * k3);
        y += step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += step;
    }
    return y;
}

// Composite Simpson rule with n (even) panels.
inline double simpson(const std::function<double(double)>& f, double a, double b, int n) {
    if (n % 2 != 0) throw std::invalid_argument("simpson needs an even panel count");
    const double h = (b - a) / n;
    double s = f(a) + f(b);
    for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 == 1 ? 4.0 : 2.0);
    return s * h / 3.0;
}

// Plain double-precision Gaussian elimination with partial pivoting.
inline std::vector<double> solve_linear(std::vector<std::vector<double>> a,
                                        std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
        if (std::fabs(a[piv][col]) == 0.0) throw std::runtime_error("singular system");
        std::swap(a[piv], a[col]);
        std::swap(b[piv], b[col]);
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            for (std::size_t k = col; k < n; ++k) a[r][k] -= f * a[col][k];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t ri = n; ri-- > 0;) {
        double s = b[ri];
        for (std::size_t k = ri + 1; k < n; ++k) s -= a[ri][k] * x[k];
        x[ri] = s / a[ri][ri];
    }
    return x;
}

inline double normal_logpdf_ref(double x, double mean, double sd) {
    const double d = x - mean;
    return -d * d / (2.0 * sd * sd) - std::log(sd) - 0.5 * std::log(2.0 * M_PI);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Two-sided Kolmogorov-Smirnov distance between a sample and a cdf.
inline double ks_statistic(std::vector<double> xs,
                           const std::function<double(double)>& cdf) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double f = cdf(xs[i]);
        d = std::max(d, f - static_cast<double>(i) / n);
        d = std::max(d, static_cast<double>(i + 1) / n - f);
    }
    return d;
}

inline double log_beta(double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

// Marsaglia-Tsang gamma sampler, shape >= 1.
inline double gamma_draw(cpnlmm::RandomStream& rng, double shape) {
    if (shape < 1.0) throw std::invalid_argument("gamma_draw needs shape >= 1");
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x, v;
        do {
            x = rng.normal();
            v = 1.0 + c * x;
        } while (v <= 0.0);
        v = v * v * v;
        const double u = rng.uniform();
        if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
        if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
}

inline double beta_draw(cpnlmm::RandomStream& rng, double a, double b) {
    const double g1 = gamma_draw(rng, a);
    const double g2 = gamma_draw(rng, b);
    return g1 / (g1 + g2);
}

// Known-variance normal model with a normal prior on the mean: the posterior
// is conjugate and the evidence has a closed form (Sherman-Morrison on the
// compound-symmetric marginal covariance).
struct ConjugateNormal {
    double post_mean = 0.0;
    double post_sd = 0.0;
    double log_evidence = 0.0;
};

inline ConjugateNormal conjugate_normal(const std::vector<double>& y, double sigma,
                                        double m0, double v0) {
    const double n = static_cast<double>(y.size());
    double sr = 0.0, qr = 0.0;
    for (double v : y) {
        sr += v - m0;
        qr += (v - m0) * (v - m0);
    }
    ConjugateNormal out;
    const double prec = n / (sigma * sigma) + 1.0 / (v0 * v0);
    out.post_sd = 1.0 / std::sqrt(prec);
    out.post_mean = (sr / (sigma * sigma)) / prec + m0;
    const double s2 = sigma * sigma, t2 = v0 * v0;
    const double log_det = (n - 1.0) * std::log(s2) + std::log(s2 + n * t2);
    const double quad = qr / s2 - t2 * sr * sr / (s2 * (s2 + n * t2));
    out.log_evidence = -0.5 * n * std::log(2.0 * M_PI) - 0.5 * log_det - 0.5 * quad;
    return out;
}

}  // namespace oracle
