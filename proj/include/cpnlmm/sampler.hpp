#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cpnlmm/common.hpp"
#include "cpnlmm/data.hpp"
#include "cpnlmm/hierarchy.hpp"
#include "cpnlmm/rng.hpp"
#include "cpnlmm/stats.hpp"

namespace cpnlmm {

struct McmcConfig {
    std::size_t n_chains = 4;
    std::size_t n_iters = 5000;
    std::size_t n_warmup = 2500;
    std::size_t thin = 1;
    std::uint64_t seed = 1;
    double target_accept = 0.234;
    std::size_t adapt_window = 100;  // iterations between proposal-scale refreshes
    double step_min = 1e-6;
    double step_max = 10.0;

    static McmcConfig paper_scale() { return McmcConfig{}; }

    // lighter preset for the simulation harness
    static McmcConfig desk_scale() {
        McmcConfig cfg;
        cfg.n_iters = 1500;
        cfg.n_warmup = 750;
        return cfg;
    }

    void validate() const {
        if (n_warmup >= n_iters) throw ConfigError("warmup must be shorter than the chain");
        if (n_chains < 2) throw ConfigError("need at least 2 chains for split-Rhat");
        if (thin == 0) throw ConfigError("thin must be >= 1");
    }
};

enum class InitPolicy { prior_draw, data_informed };

// CPNLMM_THREADS caps worker threads; unset or invalid falls back to the
// hardware count.
inline std::size_t thread_cap() {
    std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CPNLMM_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) cap = static_cast<std::size_t>(v);
    }
    return cap;
}

// ---------------------------------------------------------------------------
// Generic blockwise adaptive random-walk Metropolis.
//
// Target requirements:
//   using State = ...;            // has .u (vector<double>) and .lp (double)
//   State make_state(u0)
//   void refresh(State&, block)   // recompute .lp after block's coords moved
//   blocks(): vector<vector<size_t>> of coordinate indices
//
// During warmup each block's log step size follows a Robbins-Monro recursion
// toward the 0.234 acceptance target, and per-coordinate scales are refreshed
// from windowed Welford moments.  Two warmup-only safeguards deal with side
// basins that a short run cannot climb out of: the opening stretch accepts
// only uphill moves (proposal steps are still maladapted then, and tolerated
// downhill slips are exactly how a chain diffuses across a ridge into a
// shallow basin it then adapts to), and warmup keeps the best state seen,
// snapping the chain back to it at a few fixed points if the current state
// has fallen far below, restarting adaptation when that happens.  Everything
// freezes at the end of warmup so the post-warmup kernel is a fixed Markov
// kernel at the exact target.

struct ChainInfo {
    std::vector<double> accept_rate;             // per block, post-warmup
    std::vector<double> step_post_warmup_start;  // per block
    std::vector<double> step_final;              // per block
    std::size_t divergences = 0;
    std::size_t rescues = 0;  // warmup snap-backs to the best seen state
    double lp_init = 0.0;
    double lp_best_warmup = 0.0;
    double lp_final = 0.0;
};

template <class Target, class StoreFn>
ChainInfo run_adaptive_chain(Target& target, const McmcConfig& cfg, RandomStream& rng,
                             const std::vector<double>& u0, StoreFn&& store) {
    const auto& blocks = target.blocks();
    const std::size_t n_blocks = blocks.size();
    const std::size_t dim = u0.size();

    auto cur = target.make_state(u0);
    if (!std::isfinite(cur.lp))
        throw NumericalError("chain started from a state with non-finite log-posterior");
    auto prop = cur;

    std::vector<double> log_step(n_blocks);
    for (std::size_t b = 0; b < n_blocks; ++b)
        log_step[b] = std::log(2.38 / std::sqrt(static_cast<double>(blocks[b].size())));
    std::vector<double> rm_count(n_blocks, 0.0);
    std::vector<double> scale(dim, 1.0);
    std::vector<RunningMoments> moments(dim);
    std::vector<std::size_t> accepted(n_blocks, 0), proposed(n_blocks, 0);

    ChainInfo info;
    info.divergences = 0;
    info.lp_init = cur.lp;

    // rescue threshold: well inside a basin the log-posterior fluctuates on
    // the order of sqrt(dim/2), so a chain this far under its own best has
    // left for a worse basin, not just bounced around
    auto best = cur;
    const double rescue_gap = 8.0 * std::sqrt(static_cast<double>(dim) / 2.0);
    const std::size_t rescue_at[3] = {cfg.n_warmup / 2, 3 * cfg.n_warmup / 4,
                                      cfg.n_warmup > 0 ? cfg.n_warmup - 1 : 0};
    const std::size_t greedy_until = std::min(cfg.adapt_window, cfg.n_warmup / 5);
    auto restart_adaptation = [&] {
        for (std::size_t b = 0; b < n_blocks; ++b) {
            log_step[b] = std::log(2.38 / std::sqrt(static_cast<double>(blocks[b].size())));
            rm_count[b] = 0.0;
        }
        for (std::size_t k = 0; k < dim; ++k) {
            scale[k] = 1.0;
            moments[k].reset();
        }
    };

    for (std::size_t iter = 0; iter < cfg.n_iters; ++iter) {
        const bool warm = iter < cfg.n_warmup;
        const bool greedy = iter < greedy_until;
        if (iter == cfg.n_warmup) {
            for (std::size_t b = 0; b < n_blocks; ++b)
                info.step_post_warmup_start.push_back(std::exp(log_step[b]));
            std::fill(accepted.begin(), accepted.end(), 0);
            std::fill(proposed.begin(), proposed.end(), 0);
        }

        for (std::size_t b = 0; b < n_blocks; ++b) {
            prop = cur;
            const double step = std::exp(log_step[b]);
            for (std::size_t k : blocks[b]) prop.u[k] += step * scale[k] * rng.normal();
            target.refresh(prop, b);

            const double logr = prop.lp - cur.lp;
            const double log_u = std::log(rng.uniform());
            ++proposed[b];
            const bool take = std::isfinite(prop.lp) && (greedy ? logr > 0.0 : log_u < logr);
            if (take) {
                std::swap(cur, prop);
                ++accepted[b];
            }
            if (!std::isfinite(cur.lp)) {
                // should be unreachable: accepted states are finite by
                // construction; revert and count it rather than abort
                std::swap(cur, prop);
                ++info.divergences;
            }

            if (warm && !greedy) {
                const double alpha =
                    std::isfinite(logr) ? std::exp(std::min(0.0, logr)) : (logr > 0.0 ? 1.0 : 0.0);
                const double gamma = std::pow(rm_count[b] + 10.0, -0.6);
                rm_count[b] += 1.0;
                log_step[b] += gamma * (alpha - cfg.target_accept);
                log_step[b] = std::clamp(log_step[b], std::log(cfg.step_min), std::log(cfg.step_max));
            }
        }

        if (warm) {
            if (cur.lp > best.lp) best = cur;
            if ((iter == rescue_at[0] || iter == rescue_at[1] || iter == rescue_at[2]) &&
                cur.lp < best.lp - rescue_gap) {
                cur = best;
                ++info.rescues;
                // the last rescue point feeds straight into sampling, where a
                // fresh adaptation would never be re-tuned
                if (iter + 1 < cfg.n_warmup) restart_adaptation();
            }
            if (greedy) continue;  // a hill climb's moments are not posterior shaped
            for (std::size_t k = 0; k < dim; ++k) moments[k].push(cur.u[k]);
            if ((iter + 1) % cfg.adapt_window == 0) {
                for (std::size_t k = 0; k < dim; ++k) {
                    const double sd = std::sqrt(moments[k].variance());
                    if (sd > 1e-6) scale[k] = sd;
                    moments[k].reset();
                }
            }
        } else if ((iter - cfg.n_warmup) % cfg.thin == 0) {
            store(cur);
        }
    }

    for (std::size_t b = 0; b < n_blocks; ++b) {
        info.accept_rate.push_back(proposed[b] > 0
                                       ? static_cast<double>(accepted[b]) /
                                             static_cast<double>(proposed[b])
                                       : 0.0);
        info.step_final.push_back(std::exp(log_step[b]));
    }
    info.lp_best_warmup = best.lp;
    info.lp_final = cur.lp;
    return info;
}

// ---------------------------------------------------------------------------
// Model-facing target: wraps PosteriorEval with the block layout
// fixed effects | variances | one block per subject's random-effect triple.

class HierarchicalTarget {
  public:
    using State = PosteriorEval::State;

    explicit HierarchicalTarget(const PosteriorEval& eval) : eval_(&eval) {
        const ParamLayout& lay = eval.layout();
        std::vector<std::size_t> fixed;
        for (std::size_t k = 0; k < lay.n_fixed(); ++k) fixed.push_back(k);
        blocks_.push_back(fixed);
        blocks_.push_back({lay.i_log_sigma(), lay.i_log_omega0(), lay.i_log_omega2(),
                           lay.i_log_omega_cp()});
        for (std::size_t i = 0; i < lay.n_subjects(); ++i)
            blocks_.push_back({lay.i_z(i, 0), lay.i_z(i, 1), lay.i_z(i, 2)});
    }

    const std::vector<std::vector<std::size_t>>& blocks() const { return blocks_; }

    State make_state(const std::vector<double>& u0) const { return eval_->make_state(u0); }

    void refresh(State& st, std::size_t block) const {
        if (block == 0) {
            eval_->refresh(st, BlockKind::fixed_effects, 0);
        } else if (block == 1) {
            eval_->refresh(st, BlockKind::variances, 0);
        } else {
            eval_->refresh(st, BlockKind::subject, block - 2);
        }
    }

  private:
    const PosteriorEval* eval_;
    std::vector<std::vector<std::size_t>> blocks_;
};

// ---------------------------------------------------------------------------
// Stored draws (constrained scale) plus per-observation log-likelihoods.

class PosteriorDraws {
  public:
    std::vector<std::string> names;
    std::size_t n_chains = 0;
    std::size_t n_kept = 0;    // post-warmup draws per chain (after thinning)
    std::size_t n_params = 0;  // constrained columns
    std::size_t n_obs = 0;

    std::vector<std::vector<double>> draws;    // [chain][it * n_params + p]
    std::vector<std::vector<double>> loglik;   // [chain][it * n_obs + j]
    std::vector<std::vector<double>> logpost;  // [chain][it]
    std::vector<ChainInfo> chain_info;

    double draw(std::size_t c, std::size_t it, std::size_t p) const {
        return draws[c][it * n_params + p];
    }

    std::vector<double> column(std::size_t c, std::size_t p) const {
        std::vector<double> out(n_kept);
        for (std::size_t it = 0; it < n_kept; ++it) out[it] = draw(c, it, p);
        return out;
    }

    // all chains stacked, chain-major
    std::vector<double> pooled_column(std::size_t p) const {
        std::vector<double> out;
        out.reserve(n_chains * n_kept);
        for (std::size_t c = 0; c < n_chains; ++c)
            for (std::size_t it = 0; it < n_kept; ++it) out.push_back(draw(c, it, p));
        return out;
    }

    std::size_t param_index(const std::string& name) const {
        for (std::size_t p = 0; p < names.size(); ++p)
            if (names[p] == name) return p;
        throw ConfigError("unknown parameter name '" + name + "'");
    }
};

inline std::vector<std::string> constrained_names(const ParamLayout& lay) {
    std::vector<std::string> names;
    names.push_back("beta0");
    if (lay.beta1_free()) names.push_back("beta1");
    names.push_back("beta2");
    names.push_back("beta_cp");
    if (lay.with_theta_t()) names.push_back("theta_t");
    names.push_back("sigma_eps");
    names.push_back("omega0");
    names.push_back("omega2");
    names.push_back("omega_cp");
    for (std::size_t i = 0; i < lay.n_subjects(); ++i) {
        const std::string tag = "[" + std::to_string(i + 1) + "]";
        names.push_back("eta0" + tag);
        names.push_back("eta2" + tag);
        names.push_back("etacp" + tag);
    }
    return names;
}

// Constrained row in the order produced by constrained_names: fixed effects,
// SDs, then centered random effects eta = omega * z.
inline void constrained_row(const ParamLayout& lay, const Constrained& c,
                            std::vector<double>& row) {
    row.clear();
    row.push_back(c.fixed.beta0);
    if (lay.beta1_free()) row.push_back(c.fixed.beta1);
    row.push_back(c.fixed.beta2);
    row.push_back(c.fixed.beta_cp);
    if (lay.with_theta_t()) row.push_back(c.fixed.theta_t);
    row.push_back(c.var.sigma_eps);
    row.push_back(c.var.omega0);
    row.push_back(c.var.omega2);
    row.push_back(c.var.omega_cp);
    for (std::size_t i = 0; i < lay.n_subjects(); ++i) {
        row.push_back(c.var.omega0 * c.z[i].z0);
        row.push_back(c.var.omega2 * c.z[i].z2);
        row.push_back(c.var.omega_cp * c.z[i].zcp);
    }
}

// ---------------------------------------------------------------------------
// Initialization

inline std::vector<double> initialize(InitPolicy policy, const PosteriorEval& eval,
                                      RandomStream& rng, double jitter_sd) {
    const ParamLayout& lay = eval.layout();
    const PriorConfig& pr = eval.priors();
    const LongitudinalDataset& data = eval.data();

    FixedEffects fixed;
    VarianceComponents var;
    std::vector<ReTriple> z(lay.n_subjects());  // prior_draw leaves these at zero

    auto clamp_interior = [](double x, const UniformPrior& b) {
        const double pad = 1e-3 * (b.hi - b.lo);
        return std::clamp(x, b.lo + pad, b.hi - pad);
    };

    for (int attempt = 0; attempt < 100; ++attempt) {
        if (policy == InitPolicy::data_informed) {
            std::vector<double> all_times;
            for (const auto& s : data.subjects())
                for (double t : s.times) all_times.push_back(t);
            const auto [t_lo, t_hi] = data.time_range();
            const double early_cut = t_lo + (t_hi - t_lo) / 3.0;
            const double late_cut = quantile_type7(all_times, 0.5);

            double first_sum = 0.0;
            std::vector<double> plateau, late_y, late_t;
            std::vector<std::size_t> late_k;
            double within_ss = 0.0, early_ss = 0.0;
            std::size_t within_n = 0, early_n = 0, early_subj = 0;
            double lt_sum = 0.0, ly_sum = 0.0, ltt = 0.0, lty = 0.0;
            std::size_t late_n = 0;
            for (const auto& s : data.subjects()) {
                first_sum += s.y.front();
                double m = 0.0;
                for (double v : s.y) m += v;
                m /= static_cast<double>(s.n_obs());
                double em = 0.0, sly = 0.0, slt = 0.0;
                std::size_t ek = 0, lk = 0;
                for (std::size_t j = 0; j < s.n_obs(); ++j) {
                    const double v = s.y[j];
                    within_ss += (v - m) * (v - m);
                    ++within_n;
                    if (s.times[j] <= early_cut) {
                        em += v;
                        ++ek;
                    }
                    if (s.times[j] > late_cut) {
                        lt_sum += s.times[j];
                        ly_sum += v;
                        ltt += s.times[j] * s.times[j];
                        lty += s.times[j] * v;
                        ++late_n;
                        sly += v;
                        slt += s.times[j];
                        ++lk;
                    }
                }
                em = ek >= 1 ? em / static_cast<double>(ek) : s.y.front();
                plateau.push_back(em);
                late_y.push_back(lk >= 1 ? sly / static_cast<double>(lk) : 0.0);
                late_t.push_back(lk >= 1 ? slt / static_cast<double>(lk) : 0.0);
                late_k.push_back(lk);
                if (ek >= 2) {
                    ++early_subj;
                    early_n += ek;
                    for (std::size_t j = 0; j < s.n_obs(); ++j)
                        if (s.times[j] <= early_cut) early_ss += (s.y[j] - em) * (s.y[j] - em);
                }
            }
            fixed.beta0 = first_sum / static_cast<double>(data.n_subjects());
            fixed.beta1 = 0.0;

            // pooled OLS slope over the late half of follow-up
            double late_slope = 0.0, late_mean = fixed.beta0;
            if (late_n >= 2) {
                const double n = static_cast<double>(late_n);
                const double den = ltt - lt_sum * lt_sum / n;
                if (den > 0.0) late_slope = (lty - lt_sum * ly_sum / n) / den;
                late_mean = ly_sum / n;
            }
            // beta2 is a slope for the piecewise family but a relative decay
            // rate for the exponential model
            fixed.beta2 =
                eval.model() == ModelKind::dem
                    ? std::clamp(-late_slope / std::max(std::fabs(late_mean), 0.5), -2.0, 2.0)
                    : late_slope;
            fixed.beta_cp = clamp_interior(quantile_type7(all_times, 0.5), pr.beta_cp);
            fixed.theta_t =
                clamp_interior(0.5 * (pr.theta_t.lo + pr.theta_t.hi), pr.theta_t);

            // Residual scale from the early follow-up window, where these
            // trajectories sit on their plateau; the all-time within-subject
            // spread folds the decline into sigma and can strand chains in a
            // huge-noise flat-trajectory basin.
            const double within_sd =
                within_n > 1 ? std::sqrt(within_ss / static_cast<double>(within_n - 1)) : 1.0;
            double resid_sd = within_sd;
            if (early_n > early_subj)
                resid_sd = std::sqrt(early_ss / static_cast<double>(early_n - early_subj));
            var.sigma_eps = std::max(0.1, std::min(within_sd, resid_sd));
            var.omega0 = std::max(0.1, std::sqrt(sample_variance(plateau)));
            var.omega_cp = std::max(0.1, 0.1 * (pr.beta_cp.hi - pr.beta_cp.lo));

            // Per-subject starts: the level effect from the subject's plateau
            // offset, the slope (or rate) and change-point effects from a
            // small grid minimizing the subject's own squared error under the
            // population start.  Without these a steep, early-turning, or
            // even growing trajectory opens with huge residuals, and the
            // cheapest early move is then inflating sigma, which is the rim
            // of the flat-trajectory basin.  A grid beats closed-form guesses
            // here because the exponential model amplifies any rate
            // misestimate into overflow-scale error.
            std::vector<double> eta2(lay.n_subjects(), 0.0), etacp(lay.n_subjects(), 0.0);
            double eta2_max = 0.0;
            for (std::size_t i = 0; i < lay.n_subjects(); ++i) {
                if (late_k[i] < 1 || late_t[i] <= fixed.beta_cp + 0.5) continue;
                const auto& s = data.subjects()[i];
                const double eta0 = plateau[i] - fixed.beta0;
                double best_sse = std::numeric_limits<double>::infinity();
                double best_e2 = 0.0, best_ecp = 0.0;
                // a linear slope has to chase the subject's full drop, so its
                // grid widens with the data; a decay rate never needs to
                const double drop = std::fabs(late_y[i] - plateau[i]) /
                                    std::max(late_t[i] - fixed.beta_cp, 1.0);
                const double reach =
                    eval.model() == ModelKind::dem ? 2.5 : std::max(2.5, 2.0 * drop);
                for (int cc = -8; cc <= 8; ++cc) {
                    const double ecp = 0.5 * static_cast<double>(cc);
                    const double cp_i = fixed.beta_cp + ecp;
                    if (cp_i <= pr.beta_cp.lo || cp_i >= pr.beta_cp.hi) continue;
                    for (int c = -10; c <= 10; ++c) {
                        const double e2 = 0.1 * reach * static_cast<double>(c);
                        const ThetaIndividual th = individual_params(fixed, eta0, e2, ecp);
                        const MeanCurve curve(eval.model(), th);
                        double sse = 0.0;
                        for (std::size_t j = 0; j < s.n_obs(); ++j) {
                            const double r = s.y[j] - curve(s.times[j]);
                            sse += r * r;
                        }
                        if (sse < best_sse) {
                            best_sse = sse;
                            best_e2 = e2;
                            best_ecp = ecp;
                        }
                    }
                }
                eta2[i] = best_e2;
                etacp[i] = best_ecp;
                eta2_max = std::max(eta2_max, std::fabs(best_e2));
            }
            var.omega2 =
                std::max({0.1, std::sqrt(sample_variance(eta2)), eta2_max / 3.0});
            var.omega_cp = std::max(var.omega_cp, std::sqrt(sample_variance(etacp)));
            for (std::size_t i = 0; i < lay.n_subjects(); ++i) {
                z[i].z0 = std::clamp((plateau[i] - fixed.beta0) / var.omega0, -3.0, 3.0);
                z[i].z2 = std::clamp(eta2[i] / var.omega2, -4.0, 4.0);
                z[i].zcp = std::clamp(etacp[i] / var.omega_cp, -4.0, 4.0);
            }
        } else {
            // prior draws with the half-Cauchy tail capped to keep starts sane
            fixed.beta0 = rng.normal(pr.beta0.mean, pr.beta0.sd);
            fixed.beta1 = 0.0;
            fixed.beta2 = rng.normal(pr.beta2.mean, pr.beta2.sd);
            fixed.beta_cp = clamp_interior(rng.uniform(pr.beta_cp.lo, pr.beta_cp.hi), pr.beta_cp);
            fixed.theta_t = clamp_interior(rng.uniform(pr.theta_t.lo, pr.theta_t.hi), pr.theta_t);
            auto hc_draw = [&](double s) { return s * std::tan(M_PI_2 * rng.uniform(0.0, 0.95)); };
            var.sigma_eps = std::max(0.05, hc_draw(pr.sigma_eps.scale));
            var.omega0 = std::max(0.05, hc_draw(pr.omega0.scale));
            var.omega2 = std::max(0.05, hc_draw(pr.omega2.scale));
            var.omega_cp = std::max(0.05, hc_draw(pr.omega_cp.scale));
        }

        std::vector<double> u = encode(lay, fixed, var, z);
        double lp_floor = -std::numeric_limits<double>::infinity();
        if (jitter_sd > 0.0) {
            // coordinates live on very different scales (a decay rate runs an
            // order of magnitude under a slope), so a fixed-size nudge can be
            // a 20 sigma kick that lands the chain in the wrong basin; hold
            // jittered starts within a few typical-set widths of the clean
            // point and retry smaller otherwise
            const double lp0 = eval.make_state(u).lp;
            if (std::isfinite(lp0)) lp_floor = lp0 - 30.0;
            const double shrink = 1.0 / (1.0 + attempt);  // tame the jitter on retries
            // population-level coordinates only: a nudge on a warm-started
            // subject effect rescales that subject's whole curve, and on a
            // steep trajectory that alone wrecks the start
            const std::size_t n_head = lay.n_subjects() > 0 ? lay.i_z(0, 0) : u.size();
            for (std::size_t k = 0; k < n_head; ++k)
                u[k] += jitter_sd * shrink * rng.normal();
        }
        PosteriorEval::State st = eval.make_state(u);
        if (std::isfinite(st.lp) && st.lp >= lp_floor) return u;
    }
    throw NumericalError("no finite log-posterior start found in 100 attempts");
}

// ---------------------------------------------------------------------------

inline PosteriorDraws run_chains(ModelKind model, const LongitudinalDataset& data,
                                 const PriorConfig& priors, const McmcConfig& cfg,
                                 InitPolicy policy = InitPolicy::data_informed) {
    cfg.validate();
    PosteriorEval eval(model, data, priors);
    const ParamLayout& lay = eval.layout();
    HierarchicalTarget target(eval);

    PosteriorDraws out;
    out.names = constrained_names(lay);
    out.n_chains = cfg.n_chains;
    out.n_params = out.names.size();
    out.n_obs = data.n_obs();
    out.n_kept = (cfg.n_iters - cfg.n_warmup + cfg.thin - 1) / cfg.thin;
    out.draws.resize(cfg.n_chains);
    out.loglik.resize(cfg.n_chains);
    out.logpost.resize(cfg.n_chains);
    out.chain_info.resize(cfg.n_chains);

    // chains own disjoint buffers and derived streams, so the result is
    // identical whether they run threaded or back to back
    auto run_one = [&](std::size_t chain) {
        RandomStream init_rng(derive_seed(cfg.seed, kStreamInit, chain));
        // chain 0 starts at the policy point, later chains jitter around it
        const double jitter = chain == 0 ? 0.0 : 0.1;
        std::vector<double> u0 = initialize(policy, eval, init_rng, jitter);

        RandomStream rng(derive_seed(cfg.seed, kStreamChain, chain));
        auto& draw_buf = out.draws[chain];
        auto& ll_buf = out.loglik[chain];
        auto& lp_buf = out.logpost[chain];
        draw_buf.reserve(out.n_kept * out.n_params);
        ll_buf.reserve(out.n_kept * out.n_obs);
        lp_buf.reserve(out.n_kept);

        std::vector<double> row;
        auto store = [&](const PosteriorEval::State& st) {
            const Constrained c = decode(lay, st.u);
            constrained_row(lay, c, row);
            draw_buf.insert(draw_buf.end(), row.begin(), row.end());
            const auto obs_ll = per_observation_loglik(model, data, lay, st.u);
            for (const auto& subj_row : obs_ll)
                ll_buf.insert(ll_buf.end(), subj_row.begin(), subj_row.end());
            lp_buf.push_back(st.lp);
        };

        out.chain_info[chain] = run_adaptive_chain(target, cfg, rng, u0, store);
    };

    const std::size_t workers = std::min(cfg.n_chains, thread_cap());
    if (workers <= 1) {
        for (std::size_t chain = 0; chain < cfg.n_chains; ++chain) run_one(chain);
    } else {
        std::exception_ptr first_error;
        std::mutex err_mutex;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t chain = w; chain < cfg.n_chains; chain += workers) {
                    try {
                        run_one(chain);
                    } catch (...) {
                        std::lock_guard<std::mutex> lock(err_mutex);
                        if (!first_error) first_error = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }
    return out;
}

}  // namespace cpnlmm
