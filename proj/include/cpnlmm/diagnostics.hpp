#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "cpnlmm/common.hpp"
#include "cpnlmm/sampler.hpp"
#include "cpnlmm/stats.hpp"

namespace cpnlmm {

namespace detail {

inline void check_chain_shape(const std::vector<std::vector<double>>& chains) {
    if (chains.size() < 2) throw NumericalError("need at least 2 chains");
    for (const auto& c : chains)
        if (c.size() < 4) throw NumericalError("need at least 4 iterations per chain");
    for (const auto& c : chains)
        if (c.size() != chains[0].size())
            throw NumericalError("chains must have equal length");
}

}  // namespace detail

// Split-Rhat: each chain is halved and W is the mean variance of the 2m half
// sequences, while B is taken over the m original chain means.  The floor
// sqrt((n-1)/n) is attained when the between-chain variance vanishes.
inline double split_rhat(const std::vector<std::vector<double>>& chains) {
    detail::check_chain_shape(chains);
    const std::size_t m = chains.size();
    const std::size_t n = chains[0].size();
    const std::size_t h = n / 2;

    double w_sum = 0.0;
    for (const auto& c : chains) {
        const std::vector<double> first(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(h));
        const std::vector<double> second(c.end() - static_cast<std::ptrdiff_t>(h), c.end());
        w_sum += sample_variance(first) + sample_variance(second);
    }
    const double w = w_sum / static_cast<double>(2 * m);
    if (w == 0.0) throw DegenerateDraws("within-chain variance is zero in all chains");

    std::vector<double> means(m);
    for (std::size_t j = 0; j < m; ++j) means[j] = sample_mean(chains[j]);
    const double nn = static_cast<double>(n);
    const double b = nn * sample_variance(means);

    return std::sqrt(((nn - 1.0) / nn * w + b / nn) / w);
}

// Multi-chain ESS: combined autocorrelations
//   rho_t = 1 - (W - mean_j acov_t^j) / varplus
// summed over Geyer pairs (rho_1+rho_2), (rho_3+rho_4), ... until the first
// non-positive pair, giving ESS = m*n / (1 + 2*sum), capped at m*n.
inline double effective_sample_size(const std::vector<std::vector<double>>& chains) {
    detail::check_chain_shape(chains);
    const std::size_t m = chains.size();
    const std::size_t n = chains[0].size();
    const double nn = static_cast<double>(n);

    std::vector<double> means(m);
    double w_sum = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        means[j] = sample_mean(chains[j]);
        w_sum += sample_variance(chains[j]);
    }
    const double w = w_sum / static_cast<double>(m);
    if (w == 0.0) throw DegenerateDraws("zero-variance draws");
    const double b = nn * sample_variance(means);
    const double varplus = (nn - 1.0) / nn * w + b / nn;

    // per-chain autocovariances at lag t, 1/n normalization
    auto acov = [&](std::size_t j, std::size_t t) {
        const auto& c = chains[j];
        double s = 0.0;
        for (std::size_t i = 0; i + t < n; ++i) s += (c[i] - means[j]) * (c[i + t] - means[j]);
        return s / nn;
    };

    double rho_sum = 0.0;
    const std::size_t max_lag = n - 2;
    for (std::size_t t = 1; t + 1 <= max_lag; t += 2) {
        double pair = 0.0;
        for (std::size_t dt = 0; dt < 2; ++dt) {
            double g = 0.0;
            for (std::size_t j = 0; j < m; ++j) g += acov(j, t + dt);
            g /= static_cast<double>(m);
            pair += 1.0 - (w - g) / varplus;
        }
        if (pair <= 0.0) break;
        rho_sum += pair;
    }

    const double total = static_cast<double>(m) * nn;
    const double tau = 1.0 + 2.0 * rho_sum;
    return std::min(total, total / tau);
}

enum class IntervalKind { quantile, hpd };

inline IntervalKind interval_from_name(const std::string& s) {
    if (s == "quantile") return IntervalKind::quantile;
    if (s == "hpd") return IntervalKind::hpd;
    throw ConfigError("unknown interval kind '" + s + "' (expected quantile|hpd)");
}

struct ParamSummary {
    std::string name;
    double median = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    double rhat = std::numeric_limits<double>::quiet_NaN();
    double ess = std::numeric_limits<double>::quiet_NaN();
    double mcse = std::numeric_limits<double>::quiet_NaN();
    bool degenerate = false;
};

struct ChainDiagnostics {
    double level = 0.95;
    IntervalKind kind = IntervalKind::quantile;
    std::vector<ParamSummary> rows;

    const ParamSummary& row(const std::string& name) const {
        for (const auto& r : rows)
            if (r.name == name) return r;
        throw ConfigError("no summary row for parameter '" + name + "'");
    }

    double max_rhat() const {
        double v = 0.0;
        for (const auto& r : rows)
            if (!r.degenerate && r.rhat > v) v = r.rhat;
        return v;
    }
};

inline ChainDiagnostics summarize(const PosteriorDraws& draws, double level = 0.95,
                                  IntervalKind kind = IntervalKind::quantile) {
    if (draws.n_chains == 0 || draws.n_kept == 0) throw NumericalError("summarize: empty draws");
    ChainDiagnostics out;
    out.level = level;
    out.kind = kind;
    out.rows.reserve(draws.n_params);

    for (std::size_t p = 0; p < draws.n_params; ++p) {
        ParamSummary r;
        r.name = draws.names[p];
        const std::vector<double> pooled = draws.pooled_column(p);
        r.median = quantile_type7(pooled, 0.5);
        if (kind == IntervalKind::quantile) {
            const double tail = (1.0 - level) / 2.0;
            r.lo = quantile_type7(pooled, tail);
            r.hi = quantile_type7(pooled, 1.0 - tail);
        } else {
            auto [lo, hi] = hpd_interval(pooled, level);
            r.lo = lo;
            r.hi = hi;
        }
        std::vector<std::vector<double>> per_chain(draws.n_chains);
        for (std::size_t c = 0; c < draws.n_chains; ++c) per_chain[c] = draws.column(c, p);
        try {
            r.rhat = split_rhat(per_chain);
            r.ess = effective_sample_size(per_chain);
            r.mcse = std::sqrt(sample_variance(pooled)) / std::sqrt(r.ess);
        } catch (const DegenerateDraws&) {
            r.degenerate = true;
        }
        out.rows.push_back(r);
    }
    return out;
}

}  // namespace cpnlmm
