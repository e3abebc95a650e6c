#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "cpnlmm/common.hpp"
#include "cpnlmm/data.hpp"
#include "cpnlmm/models.hpp"
#include "cpnlmm/stats.hpp"

namespace cpnlmm {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Priors

struct NormalPrior {
    double mean, sd;
};
struct UniformPrior {
    double lo, hi;
};
struct HalfCauchyPrior {
    double scale;
};

struct PriorConfig {
    NormalPrior beta0{10.0, 10.0};
    NormalPrior beta1{0.0, 10.0};  // used only when beta1_free
    NormalPrior beta2{0.0, 10.0};
    UniformPrior beta_cp{0.0, 20.0};
    UniformPrior theta_t{0.0, 5.0};
    HalfCauchyPrior sigma_eps{10.0};
    HalfCauchyPrior omega0{1.0};
    HalfCauchyPrior omega2{1.0};
    HalfCauchyPrior omega_cp{1.0};
    bool beta1_free = false;

    static PriorConfig simulation_default() { return PriorConfig{}; }

    // Bounds for real-data fits follow the observed time span.
    static PriorConfig data_driven(const LongitudinalDataset& data) {
        PriorConfig pr;
        auto [lo, hi] = data.time_range();
        if (!(hi > lo)) throw DataError("degenerate time range for data-driven priors");
        pr.beta_cp = {lo, hi};
        pr.theta_t = {0.0, (hi - lo) / 4.0};
        return pr;
    }

    void validate() const {
        if (!(beta_cp.lo < beta_cp.hi) || !(theta_t.lo < theta_t.hi))
            throw ConfigError("uniform prior needs lo < hi");
        if (!(sigma_eps.scale > 0.0) || !(omega0.scale > 0.0) || !(omega2.scale > 0.0) ||
            !(omega_cp.scale > 0.0))
            throw ConfigError("half-Cauchy scale must be positive");
        if (!(beta0.sd > 0.0) || !(beta1.sd > 0.0) || !(beta2.sd > 0.0))
            throw ConfigError("normal prior sd must be positive");
    }
};

// ---------------------------------------------------------------------------
// Parameter containers

struct FixedEffects {
    double beta0 = 0.0;
    double beta1 = 0.0;
    double beta2 = 0.0;
    double beta_cp = 0.0;
    double theta_t = 0.0;
};

struct VarianceComponents {
    double sigma_eps = 1.0;
    double omega0 = 1.0;
    double omega2 = 1.0;
    double omega_cp = 1.0;
};

// Standardized (unit-scale) random effects; the actual deviation is
// eta_k = omega_k * z_k.  Storing z keeps the geometry non-centered, which
// avoids the funnel between omega and eta without changing the posterior.
struct ReTriple {
    double z0 = 0.0;
    double z2 = 0.0;
    double zcp = 0.0;
};

inline ThetaIndividual individual_params(const FixedEffects& f, double eta0, double eta2,
                                         double eta_cp) {
    ThetaIndividual th;
    th.theta0 = f.beta0 + eta0;
    th.theta1 = f.beta1;
    th.theta2 = f.beta2 + eta2;
    th.theta_cp = f.beta_cp + eta_cp;
    th.theta_t = f.theta_t;
    return th;
}

// ---------------------------------------------------------------------------
// Constrained <-> unconstrained transforms

inline double sigmoid(double v) {
    return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline double log_sigmoid(double v) {
    return v >= 0.0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
}

inline double constrain_interval(double v, double lo, double hi) {
    return lo + (hi - lo) * sigmoid(v);
}

inline double unconstrain_interval(double x, double lo, double hi) {
    const double p = (x - lo) / (hi - lo);
    if (!(p > 0.0) || !(p < 1.0))
        throw NumericalError("interval transform: value not strictly inside bounds");
    return std::log(p) - std::log1p(-p);
}

// log |dx/dv| for the scaled-logit map
inline double interval_log_jac(double v, double lo, double hi) {
    return std::log(hi - lo) + log_sigmoid(v) + log_sigmoid(-v);
}

// Index map for the flat unconstrained vector u:
//   [beta0, (beta1), beta2, logit(beta_cp), (logit(theta_t)),
//    log sigma_eps, log omega0, log omega2, log omega_cp,
//    z0_1, z2_1, zcp_1, z0_2, ...]
// beta1 is present only when freed by config; theta_t only for bwm/bcr/dem.
class ParamLayout {
  public:
    ParamLayout(ModelKind model, std::size_t n_subjects, const PriorConfig& priors)
        : model_(model),
          n_subjects_(n_subjects),
          beta1_free_(priors.beta1_free),
          cp_bounds_(priors.beta_cp),
          tt_bounds_(priors.theta_t) {}

    ModelKind model() const { return model_; }
    std::size_t n_subjects() const { return n_subjects_; }
    bool beta1_free() const { return beta1_free_; }
    bool with_theta_t() const { return has_theta_t(model_); }
    const UniformPrior& cp_bounds() const { return cp_bounds_; }
    const UniformPrior& tt_bounds() const { return tt_bounds_; }

    std::size_t i_beta0() const { return 0; }
    std::size_t i_beta1() const { return 1; }  // valid only when beta1_free
    std::size_t i_beta2() const { return beta1_free_ ? 2 : 1; }
    std::size_t i_beta_cp() const { return i_beta2() + 1; }
    std::size_t i_theta_t() const { return i_beta_cp() + 1; }  // valid only with_theta_t
    std::size_t n_fixed() const { return i_beta_cp() + 1 + (with_theta_t() ? 1 : 0); }

    std::size_t i_log_sigma() const { return n_fixed(); }
    std::size_t i_log_omega0() const { return n_fixed() + 1; }
    std::size_t i_log_omega2() const { return n_fixed() + 2; }
    std::size_t i_log_omega_cp() const { return n_fixed() + 3; }

    std::size_t z_offset() const { return n_fixed() + 4; }
    std::size_t i_z(std::size_t subject, std::size_t k) const {
        return z_offset() + 3 * subject + k;
    }

    std::size_t dim() const { return z_offset() + 3 * n_subjects_; }

  private:
    ModelKind model_;
    std::size_t n_subjects_;
    bool beta1_free_;
    UniformPrior cp_bounds_;
    UniformPrior tt_bounds_;
};

// Decoded view of an unconstrained vector, with the transform's log-Jacobian.
struct Constrained {
    FixedEffects fixed;
    VarianceComponents var;
    std::vector<ReTriple> z;
    double log_jacobian = 0.0;
};

inline Constrained decode(const ParamLayout& lay, const std::vector<double>& u) {
    if (u.size() != lay.dim()) throw NumericalError("decode: wrong parameter dimension");
    Constrained c;
    double lj = 0.0;
    c.fixed.beta0 = u[lay.i_beta0()];
    c.fixed.beta1 = lay.beta1_free() ? u[lay.i_beta1()] : 0.0;
    c.fixed.beta2 = u[lay.i_beta2()];
    {
        const auto& b = lay.cp_bounds();
        const double v = u[lay.i_beta_cp()];
        c.fixed.beta_cp = constrain_interval(v, b.lo, b.hi);
        lj += interval_log_jac(v, b.lo, b.hi);
    }
    if (lay.with_theta_t()) {
        const auto& b = lay.tt_bounds();
        const double v = u[lay.i_theta_t()];
        c.fixed.theta_t = constrain_interval(v, b.lo, b.hi);
        lj += interval_log_jac(v, b.lo, b.hi);
    } else {
        c.fixed.theta_t = 0.0;
    }
    c.var.sigma_eps = std::exp(u[lay.i_log_sigma()]);
    c.var.omega0 = std::exp(u[lay.i_log_omega0()]);
    c.var.omega2 = std::exp(u[lay.i_log_omega2()]);
    c.var.omega_cp = std::exp(u[lay.i_log_omega_cp()]);
    lj += u[lay.i_log_sigma()] + u[lay.i_log_omega0()] + u[lay.i_log_omega2()] +
          u[lay.i_log_omega_cp()];
    c.z.resize(lay.n_subjects());
    for (std::size_t i = 0; i < lay.n_subjects(); ++i) {
        c.z[i].z0 = u[lay.i_z(i, 0)];
        c.z[i].z2 = u[lay.i_z(i, 1)];
        c.z[i].zcp = u[lay.i_z(i, 2)];
    }
    c.log_jacobian = lj;
    return c;
}

inline std::vector<double> encode(const ParamLayout& lay, const FixedEffects& fixed,
                                  const VarianceComponents& var,
                                  const std::vector<ReTriple>& z) {
    if (z.size() != lay.n_subjects()) throw NumericalError("encode: wrong number of subjects");
    if (!(var.sigma_eps > 0.0 && var.omega0 > 0.0 && var.omega2 > 0.0 && var.omega_cp > 0.0))
        throw NumericalError("encode: SDs must be positive");
    std::vector<double> u(lay.dim(), 0.0);
    u[lay.i_beta0()] = fixed.beta0;
    if (lay.beta1_free()) u[lay.i_beta1()] = fixed.beta1;
    u[lay.i_beta2()] = fixed.beta2;
    u[lay.i_beta_cp()] = unconstrain_interval(fixed.beta_cp, lay.cp_bounds().lo, lay.cp_bounds().hi);
    if (lay.with_theta_t())
        u[lay.i_theta_t()] =
            unconstrain_interval(fixed.theta_t, lay.tt_bounds().lo, lay.tt_bounds().hi);
    u[lay.i_log_sigma()] = std::log(var.sigma_eps);
    u[lay.i_log_omega0()] = std::log(var.omega0);
    u[lay.i_log_omega2()] = std::log(var.omega2);
    u[lay.i_log_omega_cp()] = std::log(var.omega_cp);
    for (std::size_t i = 0; i < lay.n_subjects(); ++i) {
        u[lay.i_z(i, 0)] = z[i].z0;
        u[lay.i_z(i, 1)] = z[i].z2;
        u[lay.i_z(i, 2)] = z[i].zcp;
    }
    return u;
}

inline ThetaIndividual subject_theta(const Constrained& c, std::size_t i) {
    return individual_params(c.fixed, c.var.omega0 * c.z[i].z0, c.var.omega2 * c.z[i].z2,
                             c.var.omega_cp * c.z[i].zcp);
}

// ---------------------------------------------------------------------------
// Densities

inline double log_likelihood_subject(ModelKind model, const Subject& s,
                                     const ThetaIndividual& th, double sigma_eps) {
    MeanCurve curve(model, th);
    double ll = 0.0;
    for (std::size_t j = 0; j < s.n_obs(); ++j) {
        const double m = curve(s.times[j]);
        if (!std::isfinite(m)) return kNegInf;
        ll += normal_logpdf(s.y[j], m, sigma_eps);
    }
    return ll;
}

// Prior over the constrained state.  Uniform-bounded parameters must lie
// strictly inside their support; SDs strictly positive; otherwise -inf.
// The standardized random effects carry unit-normal terms (their omega scaling
// lives in subject_theta), which is measure-equivalent to N(0, omega_k) on the
// centered effects.
inline double log_prior(const ParamLayout& lay, const Constrained& c, const PriorConfig& pr) {
    if (!(c.fixed.beta_cp > pr.beta_cp.lo && c.fixed.beta_cp < pr.beta_cp.hi)) return kNegInf;
    if (lay.with_theta_t() &&
        !(c.fixed.theta_t > pr.theta_t.lo && c.fixed.theta_t < pr.theta_t.hi))
        return kNegInf;
    if (!(c.var.sigma_eps > 0.0 && c.var.omega0 > 0.0 && c.var.omega2 > 0.0 &&
          c.var.omega_cp > 0.0))
        return kNegInf;

    double lp = normal_logpdf(c.fixed.beta0, pr.beta0.mean, pr.beta0.sd);
    if (lay.beta1_free()) lp += normal_logpdf(c.fixed.beta1, pr.beta1.mean, pr.beta1.sd);
    lp += normal_logpdf(c.fixed.beta2, pr.beta2.mean, pr.beta2.sd);
    lp += -std::log(pr.beta_cp.hi - pr.beta_cp.lo);
    if (lay.with_theta_t()) lp += -std::log(pr.theta_t.hi - pr.theta_t.lo);
    lp += half_cauchy_logpdf(c.var.sigma_eps, pr.sigma_eps.scale);
    lp += half_cauchy_logpdf(c.var.omega0, pr.omega0.scale);
    lp += half_cauchy_logpdf(c.var.omega2, pr.omega2.scale);
    lp += half_cauchy_logpdf(c.var.omega_cp, pr.omega_cp.scale);
    for (const auto& zi : c.z) {
        lp += normal_logpdf(zi.z0, 0.0, 1.0);
        lp += normal_logpdf(zi.z2, 0.0, 1.0);
        lp += normal_logpdf(zi.zcp, 0.0, 1.0);
    }
    return lp;
}

struct PosteriorParts {
    double loglik = 0.0;
    double logprior = 0.0;
    double logjac = 0.0;
    double total() const {
        if (!std::isfinite(logprior) || !std::isfinite(loglik)) return kNegInf;
        return loglik + logprior + logjac;
    }
};

inline PosteriorParts log_posterior_parts(ModelKind model, const LongitudinalDataset& data,
                                          const ParamLayout& lay, const std::vector<double>& u,
                                          const PriorConfig& pr) {
    const Constrained c = decode(lay, u);
    PosteriorParts parts;
    parts.logprior = log_prior(lay, c, pr);
    parts.logjac = c.log_jacobian;
    double ll = 0.0;
    for (std::size_t i = 0; i < data.n_subjects(); ++i)
        ll += log_likelihood_subject(model, data.subjects()[i], subject_theta(c, i),
                                     c.var.sigma_eps);
    parts.loglik = ll;
    return parts;
}

inline double log_posterior(ModelKind model, const LongitudinalDataset& data,
                            const ParamLayout& lay, const std::vector<double>& u,
                            const PriorConfig& pr) {
    return log_posterior_parts(model, data, lay, u, pr).total();
}

// One row per subject, one entry per observation; rows sum to the subject
// log-likelihoods (same accumulation order).
inline std::vector<std::vector<double>> per_observation_loglik(ModelKind model,
                                                               const LongitudinalDataset& data,
                                                               const ParamLayout& lay,
                                                               const std::vector<double>& u) {
    const Constrained c = decode(lay, u);
    std::vector<std::vector<double>> out(data.n_subjects());
    for (std::size_t i = 0; i < data.n_subjects(); ++i) {
        const Subject& s = data.subjects()[i];
        const ThetaIndividual th = subject_theta(c, i);
        MeanCurve curve(model, th);
        out[i].reserve(s.n_obs());
        for (std::size_t j = 0; j < s.n_obs(); ++j) {
            const double m = curve(s.times[j]);
            out[i].push_back(std::isfinite(m) ? normal_logpdf(s.y[j], m, c.var.sigma_eps)
                                              : kNegInf);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cached evaluator for the sampler

// Which part of u a proposal touched; drives how much gets recomputed.
enum class BlockKind { all, fixed_effects, variances, subject };

// Holds the per-subject residual sums of squares alongside u so that
// single-subject proposals only re-sweep that subject's observations.
// Fixed-effect and variance proposals move every subject's mean (omega scales
// the random effects), so those recompute all SSRs.
class PosteriorEval {
  public:
    PosteriorEval(ModelKind model, const LongitudinalDataset& data, const PriorConfig& priors)
        : model_(model),
          data_(&data),
          priors_(priors),
          layout_(model, data.n_subjects(), priors) {
        priors_.validate();
    }

    const ParamLayout& layout() const { return layout_; }
    ModelKind model() const { return model_; }
    const LongitudinalDataset& data() const { return *data_; }
    const PriorConfig& priors() const { return priors_; }

    struct State {
        std::vector<double> u;
        std::vector<double> ssr;   // per-subject sum of squared residuals
        std::vector<double> n_i;   // per-subject observation counts (as double)
        double loglik = kNegInf;
        double prior_jac = kNegInf;
        double lp = kNegInf;
    };

    State make_state(const std::vector<double>& u) const {
        State st;
        st.u = u;
        st.ssr.assign(data_->n_subjects(), 0.0);
        st.n_i.resize(data_->n_subjects());
        for (std::size_t i = 0; i < data_->n_subjects(); ++i)
            st.n_i[i] = static_cast<double>(data_->subjects()[i].n_obs());
        refresh(st, BlockKind::all, 0);
        return st;
    }

    // Recompute st's cached quantities after coordinates in the given block
    // changed.  subject_idx is used only for BlockKind::subject.
    void refresh(State& st, BlockKind block, std::size_t subject_idx) const {
        const Constrained c = decode(layout_, st.u);
        const double prior = log_prior(layout_, c, priors_);
        st.prior_jac = std::isfinite(prior) ? prior + c.log_jacobian : kNegInf;

        if (block == BlockKind::subject) {
            st.ssr[subject_idx] = subject_ssr(c, subject_idx);
        } else {
            for (std::size_t i = 0; i < data_->n_subjects(); ++i) st.ssr[i] = subject_ssr(c, i);
        }

        const double sigma = c.var.sigma_eps;
        const double per_obs_const = -0.5 * kLogTwoPi - std::log(sigma);
        const double inv_two_var = 0.5 / (sigma * sigma);
        double ll = 0.0;
        for (std::size_t i = 0; i < data_->n_subjects(); ++i) {
            if (!std::isfinite(st.ssr[i])) {
                ll = kNegInf;
                break;
            }
            ll += st.n_i[i] * per_obs_const - st.ssr[i] * inv_two_var;
        }
        st.loglik = ll;
        st.lp = (std::isfinite(st.prior_jac) && std::isfinite(ll)) ? ll + st.prior_jac : kNegInf;
    }

    double subject_ssr(const Constrained& c, std::size_t i) const {
        const Subject& s = data_->subjects()[i];
        MeanCurve curve(model_, subject_theta(c, i));
        double ssr = 0.0;
        for (std::size_t j = 0; j < s.n_obs(); ++j) {
            const double r = s.y[j] - curve(s.times[j]);
            ssr += r * r;
        }
        return ssr;
    }

  private:
    ModelKind model_;
    const LongitudinalDataset* data_;
    PriorConfig priors_;
    ParamLayout layout_;
};

}  // namespace cpnlmm
