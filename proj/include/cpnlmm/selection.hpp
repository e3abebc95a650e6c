#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cpnlmm/common.hpp"
#include "cpnlmm/hierarchy.hpp"
#include "cpnlmm/rng.hpp"
#include "cpnlmm/sampler.hpp"
#include "cpnlmm/stats.hpp"

namespace cpnlmm {

// ---------------------------------------------------------------------------
// WAIC

struct WaicResult {
    double waic = 0.0;
    double se = 0.0;
    double lppd = 0.0;
    double p_waic = 0.0;
};

// loglik layout matches PosteriorDraws::loglik: per chain, iteration-major
// rows of n_obs pointwise log-likelihoods.  Draws pool across chains.
inline WaicResult waic(const std::vector<std::vector<double>>& loglik, std::size_t n_obs) {
    if (n_obs == 0) throw NumericalError("waic: no observations");
    std::size_t n_draws = 0;
    for (const auto& c : loglik) {
        if (c.size() % n_obs != 0) throw NumericalError("waic: ragged loglik array");
        n_draws += c.size() / n_obs;
    }
    if (n_draws < 2) throw DegenerateDraws("waic needs at least 2 draws");

    WaicResult out;
    std::vector<double> vals(n_draws);
    std::vector<double> pointwise(n_obs);
    const double log_s = std::log(static_cast<double>(n_draws));
    for (std::size_t j = 0; j < n_obs; ++j) {
        std::size_t s = 0;
        for (const auto& c : loglik) {
            const std::size_t rows = c.size() / n_obs;
            for (std::size_t it = 0; it < rows; ++it) vals[s++] = c[it * n_obs + j];
        }
        const double lppd_j = log_sum_exp(vals) - log_s;
        // exact ties must give exactly zero penalty; the two-pass variance
        // leaves rounding residue otherwise
        bool tied = true;
        for (double v : vals) tied = tied && v == vals[0];
        const double p_j = tied ? 0.0 : sample_variance(vals);
        out.lppd += lppd_j;
        out.p_waic += p_j;
        pointwise[j] = -2.0 * (lppd_j - p_j);
    }
    out.waic = -2.0 * (out.lppd - out.p_waic);
    out.se = std::sqrt(static_cast<double>(n_obs) * sample_variance(pointwise));
    return out;
}

// ---------------------------------------------------------------------------
// Bridge sampling

struct BridgeResult {
    double log_marginal = 0.0;
    std::size_t iterations = 0;
    double rel_mcse = 0.0;
};

namespace detail {

// Optimal-bridge fixed point on the log ratios
//   l1_s = log q1(u_s) - log g(u_s)   over posterior draws,
//   l2_j = log q1(v_j) - log g(v_j)   over proposal draws.
// Terms are rearranged so only decaying exponentials appear; lstar recenters
// the ratios at the median of l1.
inline BridgeResult bridge_fixed_point(const std::vector<double>& l1,
                                       const std::vector<double>& l2) {
    const std::size_t n1 = l1.size(), n2 = l2.size();
    if (n1 == 0 || n2 == 0) throw NumericalError("bridge: empty draw set");
    const double s1 = static_cast<double>(n1) / static_cast<double>(n1 + n2);
    const double s2 = static_cast<double>(n2) / static_cast<double>(n1 + n2);
    const double lstar = quantile_type7(l1, 0.5);

    // The update r' = num(r)/den(r) is the classic iteration, but on x = log r
    // the function g(x) = log num - log den - x is strictly decreasing with a
    // single root, so bracket it and close in with Illinois false position.
    // Every sum is assembled with log-sum-exp: even draws with essentially no
    // proposal overlap give a finite (if noisy) estimate instead of a 0/0.
    const double ls1 = std::log(s1), ls2 = std::log(s2);
    const double ln1 = std::log(static_cast<double>(n1));
    const double ln2 = std::log(static_cast<double>(n2));
    auto lse2 = [](double p, double q) {
        const double m = std::max(p, q);
        return m + std::log(std::exp(p - m) + std::exp(q - m));
    };
    std::size_t evals = 0;
    auto g = [&](double x) {
        ++evals;
        double lnum = kNegInf, lden = kNegInf;
        for (double v : l2) {
            const double a = v - lstar;
            lnum = lse2(lnum, a - lse2(ls1 + a, ls2 + x));
        }
        for (double v : l1) lden = lse2(lden, -lse2(ls1 + (v - lstar), ls2 + x));
        return (lnum - ln2) - (lden - ln1) - x;
    };

    double xlo = 0.0, glo = g(xlo);
    double xhi = xlo, ghi = glo;
    for (double w = 1.0; glo < 0.0; w *= 2.0) {
        if (w > 1e9) throw NumericalError("bridge: failed to bracket the evidence ratio");
        xhi = xlo;
        ghi = glo;
        xlo -= w;
        glo = g(xlo);
    }
    for (double w = 1.0; ghi > 0.0; w *= 2.0) {
        if (w > 1e9) throw NumericalError("bridge: failed to bracket the evidence ratio");
        xlo = xhi;
        glo = ghi;
        xhi += w;
        ghi = g(xhi);
    }
    int last = 0;
    while (xhi - xlo > 1e-10 && evals < 200) {
        const double denom = ghi - glo;
        double xm = denom != 0.0 ? (xlo * ghi - xhi * glo) / denom : 0.5 * (xlo + xhi);
        if (!(xm > xlo && xm < xhi)) xm = 0.5 * (xlo + xhi);
        const double gm = g(xm);
        if (gm == 0.0) {
            xlo = xhi = xm;
            break;
        }
        if (gm > 0.0) {
            xlo = xm;
            glo = gm;
            if (last == -1) ghi *= 0.5;
            last = -1;
        } else {
            xhi = xm;
            ghi = gm;
            if (last == +1) glo *= 0.5;
            last = +1;
        }
    }
    if (xhi - xlo > 1e-6)
        throw NumericalError("bridge: root bracketing stalled (width " +
                             std::to_string(xhi - xlo) + ")");
    const double x = 0.5 * (xlo + xhi);

    BridgeResult out;
    out.log_marginal = x + lstar;
    out.iterations = evals;

    // delta-method relative MCSE, ignoring draw autocorrelation; E[f^2]/E[f]^2
    // stays within a factor n of 1, so the single exp below cannot overflow
    auto rel_term = [&](const std::vector<double>& l, bool num_side) {
        if (l.size() < 2) return 0.0;
        double sl = kNegInf, sl2 = kNegInf;
        for (double v : l) {
            const double a = v - lstar;
            const double lf = (num_side ? a : 0.0) - lse2(ls1 + a, ls2 + x);
            sl = lse2(sl, lf);
            sl2 = lse2(sl2, 2.0 * lf);
        }
        const double n = static_cast<double>(l.size());
        const double ratio = std::exp(sl2 + std::log(n) - 2.0 * sl);
        return std::max(0.0, ratio - 1.0) / (n - 1.0);
    };
    out.rel_mcse = std::sqrt(rel_term(l1, false) + rel_term(l2, true));
    return out;
}

}  // namespace detail

// Moment-matched multivariate-normal proposal fitted to the first half of
// each chain; the bridge identity then runs on the second halves against
// fresh proposal draws.  udraws: per chain, iteration-major rows of dim
// unconstrained coordinates.  log_q1 must be the unnormalized log posterior
// on that scale (Jacobians included).
inline BridgeResult bridge_generic(const std::vector<std::vector<double>>& udraws,
                                   std::size_t dim,
                                   const std::function<double(const std::vector<double>&)>& log_q1,
                                   std::uint64_t seed) {
    std::size_t total = 0;
    for (const auto& c : udraws) {
        if (c.size() % dim != 0) throw NumericalError("bridge: ragged draw array");
        total += c.size() / dim;
    }
    if (total < 4) throw NumericalError("bridge: too few draws");

    std::vector<const double*> fit_rows, est_rows;
    for (const auto& c : udraws) {
        const std::size_t rows = c.size() / dim;
        const std::size_t half = rows / 2;
        for (std::size_t it = 0; it < rows; ++it)
            (it < half ? fit_rows : est_rows).push_back(c.data() + it * dim);
    }
    const std::size_t n_fit = fit_rows.size(), n_est = est_rows.size();
    if (n_fit < 2 || n_est < 2) throw NumericalError("bridge: split halves too small");

    const auto d = static_cast<Eigen::Index>(dim);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const double* row : fit_rows)
        mean += Eigen::Map<const Eigen::VectorXd>(row, d);
    mean /= static_cast<double>(n_fit);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const double* row : fit_rows) {
        const Eigen::VectorXd diff = Eigen::Map<const Eigen::VectorXd>(row, d) - mean;
        cov.noalias() += diff * diff.transpose();
    }
    cov /= static_cast<double>(n_fit - 1);

    // Estimation noise shrinks small eigenvalues of the sample covariance
    // roughly by (1 - sqrt(d/n))^2, and an underdispersed proposal is fatal
    // here: the log ratios blow up quadratically in the mismatch.  Shrink the
    // correlation toward identity with weight d/n and inflate the scale; the
    // bridge identity holds for any overlapping proposal, so this only costs
    // a little efficiency when the fit was already good.
    {
        const double rho =
            std::min(0.9, std::max(0.05, static_cast<double>(dim) / static_cast<double>(n_fit)));
        Eigen::VectorXd sd_diag = cov.diagonal().array().max(1e-300).sqrt();
        Eigen::MatrixXd corr =
            sd_diag.cwiseInverse().asDiagonal() * cov * sd_diag.cwiseInverse().asDiagonal();
        corr = (1.0 - rho) * corr;
        corr.diagonal().array() += rho;
        const double inflate = 1.44;  // 20% extra sd
        cov = inflate * (sd_diag.asDiagonal() * corr * sd_diag.asDiagonal());
    }

    // jitter ladder keeps the Cholesky alive when the fit half is rank-poor
    Eigen::LLT<Eigen::MatrixXd> llt;
    double jitter = 0.0;
    const double base = std::max(cov.trace() / static_cast<double>(dim), 1e-12);
    for (int rung = 0; rung < 12; ++rung) {
        Eigen::MatrixXd reg = cov;
        if (jitter > 0.0) reg.diagonal().array() += jitter;
        llt.compute(reg);
        if (llt.info() == Eigen::Success) break;
        jitter = jitter == 0.0 ? 1e-10 * base : jitter * 10.0;
    }
    if (llt.info() != Eigen::Success)
        throw NumericalError("bridge: proposal covariance not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();

    double log_det_l = 0.0;
    for (Eigen::Index k = 0; k < d; ++k) log_det_l += std::log(L(k, k));
    const double dd = static_cast<double>(dim);
    auto log_g = [&](const Eigen::VectorXd& x) {
        const Eigen::VectorXd w = L.triangularView<Eigen::Lower>().solve(x - mean);
        return -0.5 * dd * kLogTwoPi - log_det_l - 0.5 * w.squaredNorm();
    };

    std::vector<double> l1;
    l1.reserve(n_est);
    std::vector<double> buf(dim);
    for (const double* row : est_rows) {
        std::copy(row, row + dim, buf.begin());
        l1.push_back(log_q1(buf) - log_g(Eigen::Map<const Eigen::VectorXd>(row, d)));
    }

    RandomStream rng(seed);
    std::vector<double> l2;
    l2.reserve(n_est);
    Eigen::VectorXd zvec(d);
    for (std::size_t j = 0; j < n_est; ++j) {
        for (Eigen::Index k = 0; k < d; ++k) zvec(k) = rng.normal();
        const Eigen::VectorXd x = mean + L * zvec;
        std::copy(x.data(), x.data() + d, buf.begin());
        const double lq = log_q1(buf);
        // points the model assigns zero mass to contribute zero, not -inf noise
        l2.push_back(std::isfinite(lq) ? lq - log_g(x) : kNegInf);
    }

    return detail::bridge_fixed_point(l1, l2);
}

// Model-facing wrapper: rebuilds the unconstrained draws from the stored
// constrained ones and evaluates the literal joint density.
inline BridgeResult bridge_log_marginal(const PosteriorDraws& draws, const PosteriorEval& eval,
                                        std::uint64_t seed) {
    const ParamLayout& lay = eval.layout();
    const std::size_t dim = lay.dim();
    const std::size_t n = lay.n_subjects();

    const std::size_t p_sigma = draws.param_index("sigma_eps");
    const std::size_t first_eta = p_sigma + 4;  // eta columns follow the four SDs

    std::vector<std::vector<double>> udraws(draws.n_chains);
    FixedEffects fixed;
    VarianceComponents var;
    std::vector<ReTriple> z(n);
    for (std::size_t c = 0; c < draws.n_chains; ++c) {
        udraws[c].reserve(draws.n_kept * dim);
        for (std::size_t it = 0; it < draws.n_kept; ++it) {
            fixed.beta0 = draws.draw(c, it, draws.param_index("beta0"));
            fixed.beta1 = lay.beta1_free() ? draws.draw(c, it, draws.param_index("beta1")) : 0.0;
            fixed.beta2 = draws.draw(c, it, draws.param_index("beta2"));
            fixed.beta_cp = draws.draw(c, it, draws.param_index("beta_cp"));
            fixed.theta_t =
                lay.with_theta_t() ? draws.draw(c, it, draws.param_index("theta_t")) : 0.0;
            var.sigma_eps = draws.draw(c, it, p_sigma);
            var.omega0 = draws.draw(c, it, p_sigma + 1);
            var.omega2 = draws.draw(c, it, p_sigma + 2);
            var.omega_cp = draws.draw(c, it, p_sigma + 3);
            for (std::size_t i = 0; i < n; ++i) {
                z[i].z0 = draws.draw(c, it, first_eta + 3 * i) / var.omega0;
                z[i].z2 = draws.draw(c, it, first_eta + 3 * i + 1) / var.omega2;
                z[i].zcp = draws.draw(c, it, first_eta + 3 * i + 2) / var.omega_cp;
            }
            const std::vector<double> u = encode(lay, fixed, var, z);
            udraws[c].insert(udraws[c].end(), u.begin(), u.end());
        }
    }

    auto log_q1 = [&eval](const std::vector<double>& u) {
        return log_posterior(eval.model(), eval.data(), eval.layout(), u, eval.priors());
    };
    return bridge_generic(udraws, dim, log_q1, seed);
}

// ---------------------------------------------------------------------------
// Posterior model probabilities

struct ModelComparisonRow {
    std::string model;
    double waic = std::numeric_limits<double>::quiet_NaN();
    double waic_se = std::numeric_limits<double>::quiet_NaN();
    double log_marginal = 0.0;
    double prior_prob = 0.0;
    double pmp = 0.0;
    std::size_t bridge_iterations = 0;
    double bridge_rel_mcse = 0.0;
};

struct ModelComparison {
    std::vector<ModelComparisonRow> rows;

    const ModelComparisonRow& row(const std::string& model) const {
        for (const auto& r : rows)
            if (r.model == model) return r;
        throw ConfigError("no comparison row for model '" + model + "'");
    }
};

// pmp_k = softmax(log marginal_k + log prior_k), max-subtracted.
inline ModelComparison posterior_model_probs(const std::vector<std::string>& models,
                                             const std::vector<double>& log_marginals,
                                             const std::vector<double>& prior_probs) {
    const std::size_t k = models.size();
    if (log_marginals.size() != k || prior_probs.size() != k)
        throw ConfigError("model/marginal/prior lists differ in length");
    if (k == 0) throw ConfigError("no models to compare");
    double prior_sum = 0.0;
    for (double p : prior_probs) {
        if (!(p >= 0.0)) throw ConfigError("negative model prior");
        prior_sum += p;
    }
    if (std::fabs(prior_sum - 1.0) > 1e-9) throw ConfigError("model priors must sum to 1");
    for (double lm : log_marginals)
        if (!std::isfinite(lm)) throw NumericalError("non-finite log marginal");

    std::vector<double> logw(k);
    for (std::size_t i = 0; i < k; ++i)
        logw[i] = log_marginals[i] +
                  (prior_probs[i] > 0.0 ? std::log(prior_probs[i]) : kNegInf);
    const double m = *std::max_element(logw.begin(), logw.end());
    double z = 0.0;
    for (double v : logw) z += std::exp(v - m);

    ModelComparison out;
    for (std::size_t i = 0; i < k; ++i) {
        ModelComparisonRow r;
        r.model = models[i];
        r.log_marginal = log_marginals[i];
        r.prior_prob = prior_probs[i];
        r.pmp = std::exp(logw[i] - m) / z;
        out.rows.push_back(r);
    }
    return out;
}

inline std::vector<double> uniform_model_prior(std::size_t k) {
    return std::vector<double>(k, 1.0 / static_cast<double>(k));
}

}  // namespace cpnlmm
