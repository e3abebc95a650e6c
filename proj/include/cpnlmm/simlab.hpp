#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cpnlmm/common.hpp"
#include "cpnlmm/data.hpp"
#include "cpnlmm/diagnostics.hpp"
#include "cpnlmm/hierarchy.hpp"
#include "cpnlmm/ioutil.hpp"
#include "cpnlmm/rng.hpp"
#include "cpnlmm/sampler.hpp"
#include "cpnlmm/selection.hpp"
#include "cpnlmm/stats.hpp"

namespace cpnlmm {

// ---------------------------------------------------------------------------
// Scenario configuration (true values are on the generating scale: variances,
// not SDs, for sigma2/omega2, matching how the study tables quote them)

struct ScenarioConfig {
    ModelKind dgp = ModelKind::dem;
    std::size_t n_replications = 50;
    std::size_t n_subjects = 50;
    std::size_t n_occasions = 10;
    double t_max = 20.0;
    double beta0 = 11.0;
    double beta1 = 0.0;
    double beta2 = 0.5;  // decay magnitude for dem, post-CP slope for bsm
    double beta_cp = 10.0;
    double theta_t = 3.0;
    double sigma2_eps = 1.4;
    double omega2_0 = 0.3;
    double omega2_2 = 0.1;
    double omega2_cp = 2.0;
    std::uint64_t seed = 20240915;
    std::string name = "custom";

    // decline handled by the dem's decay-rate magnitude
    static ScenarioConfig scenario1() {
        ScenarioConfig c;
        c.dgp = ModelKind::dem;
        c.beta2 = 0.5;
        c.t_max = 20.0;
        c.name = "scenario1";
        return c;
    }

    // same decline as a literal broken-stick slope
    static ScenarioConfig scenario2() {
        ScenarioConfig c;
        c.dgp = ModelKind::bsm;
        c.beta2 = -0.5;
        c.t_max = 20.0;
        c.name = "scenario2";
        return c;
    }

    // Follow-up truncated relative to scenario 1.  The value sits where a
    // broken-stick fit to the noiseless decline curve recovers the change
    // point without bias; shorter follow-up pushes the knot late (the visible
    // bend dominates), longer pulls it early (the convex tail drags the
    // post-knot slope down).
    static ScenarioConfig scenario3() {
        ScenarioConfig c = scenario1();
        c.t_max = 17.5;
        c.name = "scenario3";
        return c;
    }

    void validate() const {
        if (!(sigma2_eps > 0.0 && omega2_0 > 0.0 && omega2_2 > 0.0 && omega2_cp > 0.0))
            throw ConfigError("scenario variances must be positive");
        if (!(beta_cp > 0.0 && beta_cp < t_max))
            throw ConfigError("scenario beta_cp must lie inside (0, t_max)");
        if (n_replications == 0 || n_subjects == 0 || n_occasions == 0)
            throw ConfigError("scenario counts must be positive");
    }

    // distinguishes checkpoints produced under different settings
    std::uint64_t fingerprint(const McmcConfig& mcmc) const {
        std::uint64_t h = mix64(seed);
        auto add = [&h](double v) {
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(v));
            std::memcpy(&bits, &v, sizeof(bits));
            h = mix64(h ^ bits);
        };
        h = mix64(h ^ static_cast<std::uint64_t>(dgp));
        h = mix64(h ^ n_subjects);
        h = mix64(h ^ n_occasions);
        add(t_max);
        add(beta0);
        add(beta1);
        add(beta2);
        add(beta_cp);
        add(theta_t);
        add(sigma2_eps);
        add(omega2_0);
        add(omega2_2);
        add(omega2_cp);
        h = mix64(h ^ mcmc.n_chains);
        h = mix64(h ^ mcmc.n_iters);
        h = mix64(h ^ mcmc.n_warmup);
        h = mix64(h ^ mcmc.thin);
        return h;
    }
};

inline void to_json(nlohmann::json& j, const ScenarioConfig& c) {
    j = nlohmann::json{{"dgp", model_name(c.dgp)},
                       {"n_replications", c.n_replications},
                       {"n_subjects", c.n_subjects},
                       {"n_occasions", c.n_occasions},
                       {"t_max", c.t_max},
                       {"beta0", c.beta0},
                       {"beta1", c.beta1},
                       {"beta2", c.beta2},
                       {"beta_cp", c.beta_cp},
                       {"theta_t", c.theta_t},
                       {"sigma2_eps", c.sigma2_eps},
                       {"omega2_0", c.omega2_0},
                       {"omega2_2", c.omega2_2},
                       {"omega2_cp", c.omega2_cp},
                       {"seed", c.seed},
                       {"name", c.name}};
}

inline void from_json(const nlohmann::json& j, ScenarioConfig& c) {
    c.dgp = model_from_name(j.at("dgp").get<std::string>());
    j.at("n_replications").get_to(c.n_replications);
    j.at("n_subjects").get_to(c.n_subjects);
    j.at("n_occasions").get_to(c.n_occasions);
    j.at("t_max").get_to(c.t_max);
    j.at("beta0").get_to(c.beta0);
    j.at("beta1").get_to(c.beta1);
    j.at("beta2").get_to(c.beta2);
    j.at("beta_cp").get_to(c.beta_cp);
    j.at("theta_t").get_to(c.theta_t);
    j.at("sigma2_eps").get_to(c.sigma2_eps);
    j.at("omega2_0").get_to(c.omega2_0);
    j.at("omega2_2").get_to(c.omega2_2);
    j.at("omega2_cp").get_to(c.omega2_cp);
    j.at("seed").get_to(c.seed);
    if (j.contains("name")) j.at("name").get_to(c.name);
}

// ---------------------------------------------------------------------------
// Data generation

struct GeneratedDataset {
    LongitudinalDataset data;
    std::vector<ThetaIndividual> truth;
};

// One derived stream per (seed, replication, subject): times, then the
// random-effect triple (resampled until the subject's CP is observable),
// then the residuals.
inline GeneratedDataset gen_dataset(const ScenarioConfig& cfg, std::size_t replication) {
    cfg.validate();
    const double sigma_eps = std::sqrt(cfg.sigma2_eps);
    const double w0 = std::sqrt(cfg.omega2_0);
    const double w2 = std::sqrt(cfg.omega2_2);
    const double wcp = std::sqrt(cfg.omega2_cp);
    FixedEffects fixed;
    fixed.beta0 = cfg.beta0;
    fixed.beta1 = cfg.beta1;
    fixed.beta2 = cfg.beta2;
    fixed.beta_cp = cfg.beta_cp;
    fixed.theta_t = cfg.theta_t;

    std::vector<Subject> subjects;
    std::vector<ThetaIndividual> truth;
    subjects.reserve(cfg.n_subjects);
    for (std::size_t i = 0; i < cfg.n_subjects; ++i) {
        RandomStream rng(derive_seed(cfg.seed, kStreamSimData, replication, i));
        Subject s;
        s.id = "sim" + std::to_string(i + 1);
        s.times.resize(cfg.n_occasions);
        for (double& t : s.times) t = rng.uniform(0.0, cfg.t_max);
        std::sort(s.times.begin(), s.times.end());

        ThetaIndividual th;
        bool ok = false;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const double eta0 = rng.normal(0.0, w0);
            const double eta2 = rng.normal(0.0, w2);
            const double etacp = rng.normal(0.0, wcp);
            th = individual_params(fixed, eta0, eta2, etacp);
            if (th.theta_cp > 0.0 && th.theta_cp < cfg.t_max) {
                ok = true;
                break;
            }
        }
        if (!ok) throw DataError("subject CP resampling failed after 1000 attempts");

        MeanCurve curve(cfg.dgp, th);
        s.y.resize(cfg.n_occasions);
        for (std::size_t j = 0; j < cfg.n_occasions; ++j)
            s.y[j] = curve(s.times[j]) + rng.normal(0.0, sigma_eps);
        subjects.push_back(std::move(s));
        truth.push_back(th);
    }
    return GeneratedDataset{LongitudinalDataset(std::move(subjects)), std::move(truth)};
}

// ---------------------------------------------------------------------------
// Per-replication records and the aggregated report

struct RepModelRecord {
    bool ok = false;
    std::string error;
    double cp_median = 0.0;
    double cp_lo = 0.0;
    double cp_hi = 0.0;
    double waic = 0.0;
    double waic_se = 0.0;
    double log_marginal = 0.0;
    double max_rhat = 0.0;
};

struct RepRecord {
    std::size_t rep = 0;
    std::array<RepModelRecord, 4> by_model;  // indexed like kAllModels
};

struct ModelAggregate {
    std::string model;
    std::size_t n_ok = 0;
    bool degenerate = false;  // too few records for spread statistics
    double est_median = 0.0, est_lo = 0.0, est_hi = 0.0;
    double bias_median = 0.0, bias_lo = 0.0, bias_hi = 0.0;
    std::size_t cov_hits = 0, cov_trials = 0;
    double coverage = 0.0, cov_lo = 0.0, cov_hi = 0.0;
    double mean_pmp = 0.0;
    double mean_waic = 0.0, mean_waic_se = 0.0;
};

struct ExperimentReport {
    ScenarioConfig cfg;
    std::vector<RepRecord> reps;
    std::vector<ModelAggregate> aggregates;
    std::size_t n_failed_fits = 0;
};

inline std::pair<double, std::pair<double, double>> coverage_ci(std::size_t hits,
                                                                std::size_t trials) {
    if (trials == 0) throw NumericalError("coverage_ci: zero trials");
    const double p = static_cast<double>(hits) / static_cast<double>(trials);
    return {p, wilson_interval(hits, trials)};
}

// Aggregation is a pure function of the raw records so a report can always be
// recomputed from its per-replication rows.
inline std::vector<ModelAggregate> aggregate_records(const ScenarioConfig& cfg,
                                                     const std::vector<RepRecord>& reps) {
    std::vector<ModelAggregate> out;
    // replications where every model fit cleanly contribute to the PMP means
    std::array<double, 4> pmp_sum{};
    std::size_t pmp_n = 0;
    for (const auto& r : reps) {
        if (!std::all_of(r.by_model.begin(), r.by_model.end(),
                         [](const RepModelRecord& m) { return m.ok; }))
            continue;
        std::vector<std::string> names;
        std::vector<double> lm;
        for (std::size_t k = 0; k < 4; ++k) {
            names.push_back(model_name(kAllModels[k]));
            lm.push_back(r.by_model[k].log_marginal);
        }
        const ModelComparison cmp = posterior_model_probs(names, lm, uniform_model_prior(4));
        for (std::size_t k = 0; k < 4; ++k) pmp_sum[k] += cmp.rows[k].pmp;
        ++pmp_n;
    }

    for (std::size_t k = 0; k < 4; ++k) {
        ModelAggregate agg;
        agg.model = model_name(kAllModels[k]);
        std::vector<double> est, bias, waics, waic_ses;
        for (const auto& r : reps) {
            const RepModelRecord& m = r.by_model[k];
            if (!m.ok) continue;
            est.push_back(m.cp_median);
            bias.push_back(m.cp_median - cfg.beta_cp);
            waics.push_back(m.waic);
            waic_ses.push_back(m.waic_se);
            ++agg.cov_trials;
            if (m.cp_lo <= cfg.beta_cp && cfg.beta_cp <= m.cp_hi) ++agg.cov_hits;
        }
        agg.n_ok = est.size();
        if (agg.n_ok > 0) {
            agg.est_median = quantile_type7(est, 0.5);
            agg.bias_median = quantile_type7(bias, 0.5);
            agg.mean_waic = sample_mean(waics);
            agg.mean_waic_se = sample_mean(waic_ses);
            if (agg.n_ok >= 2) {
                agg.est_lo = quantile_type7(est, 0.025);
                agg.est_hi = quantile_type7(est, 0.975);
                agg.bias_lo = quantile_type7(bias, 0.025);
                agg.bias_hi = quantile_type7(bias, 0.975);
            } else {
                agg.degenerate = true;
                agg.est_lo = agg.est_hi = agg.est_median;
                agg.bias_lo = agg.bias_hi = agg.bias_median;
            }
            auto [p, ci] = coverage_ci(agg.cov_hits, agg.cov_trials);
            agg.coverage = p;
            agg.cov_lo = ci.first;
            agg.cov_hi = ci.second;
        } else {
            agg.degenerate = true;
        }
        agg.mean_pmp = pmp_n > 0 ? pmp_sum[k] / static_cast<double>(pmp_n) : 0.0;
        out.push_back(agg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json rep_record_to_json(const RepRecord& r, std::uint64_t fingerprint) {
    nlohmann::json models = nlohmann::json::object();
    for (std::size_t k = 0; k < 4; ++k) {
        const RepModelRecord& m = r.by_model[k];
        models[model_name(kAllModels[k])] = {
            {"ok", m.ok},           {"error", m.error},
            {"cp_median", m.cp_median}, {"cp_lo", m.cp_lo},
            {"cp_hi", m.cp_hi},     {"waic", m.waic},
            {"waic_se", m.waic_se}, {"log_marginal", m.log_marginal},
            {"max_rhat", m.max_rhat}};
    }
    return nlohmann::json{{"rep", r.rep}, {"fingerprint", fingerprint}, {"models", models}};
}

inline RepRecord rep_record_from_json(const nlohmann::json& j) {
    RepRecord r;
    r.rep = j.at("rep").get<std::size_t>();
    for (std::size_t k = 0; k < 4; ++k) {
        const nlohmann::json& m = j.at("models").at(model_name(kAllModels[k]));
        RepModelRecord& rec = r.by_model[k];
        rec.ok = m.at("ok").get<bool>();
        rec.error = m.at("error").get<std::string>();
        rec.cp_median = m.at("cp_median").get<double>();
        rec.cp_lo = m.at("cp_lo").get<double>();
        rec.cp_hi = m.at("cp_hi").get<double>();
        rec.waic = m.at("waic").get<double>();
        rec.waic_se = m.at("waic_se").get<double>();
        rec.log_marginal = m.at("log_marginal").get<double>();
        rec.max_rhat = m.at("max_rhat").get<double>();
    }
    return r;
}

// ---------------------------------------------------------------------------
// The experiment driver

struct ExperimentOptions {
    std::string checkpoint_dir;  // empty = no checkpoints
    std::function<void(const std::string&)> progress;  // optional logging hook
};

inline RepModelRecord fit_one_model(ModelKind model, const LongitudinalDataset& data,
                                    const McmcConfig& base_cfg, std::uint64_t fit_seed) {
    RepModelRecord rec;
    try {
        McmcConfig cfg = base_cfg;
        cfg.seed = fit_seed;
        const PriorConfig priors = PriorConfig::simulation_default();
        const PosteriorDraws draws = run_chains(model, data, priors, cfg);
        const ChainDiagnostics diag = summarize(draws, 0.95, IntervalKind::quantile);
        const ParamSummary& cp = diag.row("beta_cp");
        rec.cp_median = cp.median;
        rec.cp_lo = cp.lo;
        rec.cp_hi = cp.hi;
        rec.max_rhat = diag.max_rhat();
        const WaicResult w = waic(draws.loglik, draws.n_obs);
        rec.waic = w.waic;
        rec.waic_se = w.se;
        PosteriorEval eval(model, data, priors);
        rec.log_marginal =
            bridge_log_marginal(draws, eval, derive_seed(fit_seed, kStreamSimFit, 0xB41D6E)).log_marginal;
        rec.ok = true;
    } catch (const std::exception& e) {
        rec.ok = false;
        rec.error = e.what();
    }
    return rec;
}

inline ExperimentReport run_experiment(const ScenarioConfig& cfg, const McmcConfig& mcmc,
                                       const ExperimentOptions& opts = {}) {
    cfg.validate();
    mcmc.validate();
    namespace fs = std::filesystem;
    const std::uint64_t fp = cfg.fingerprint(mcmc);
    const bool use_ckpt = !opts.checkpoint_dir.empty();
    if (use_ckpt) fs::create_directories(opts.checkpoint_dir);

    ExperimentReport report;
    report.cfg = cfg;
    report.reps.reserve(cfg.n_replications);

    for (std::size_t rep = 0; rep < cfg.n_replications; ++rep) {
        const fs::path ckpt =
            use_ckpt ? fs::path(opts.checkpoint_dir) / ("rep_" + std::to_string(rep) + ".json")
                     : fs::path();
        if (use_ckpt && fs::exists(ckpt)) {
            try {
                const nlohmann::json j = nlohmann::json::parse(read_text_file(ckpt));
                if (j.at("fingerprint").get<std::uint64_t>() == fp) {
                    report.reps.push_back(rep_record_from_json(j));
                    if (opts.progress)
                        opts.progress("rep " + std::to_string(rep) + ": loaded checkpoint");
                    continue;
                }
            } catch (const std::exception&) {
                // unreadable or stale checkpoint: refit below
            }
        }

        const GeneratedDataset gen = gen_dataset(cfg, rep);
        RepRecord r;
        r.rep = rep;
        for (std::size_t k = 0; k < 4; ++k) {
            const ModelKind model = kAllModels[k];
            r.by_model[k] = fit_one_model(model, gen.data, mcmc,
                                          derive_seed(cfg.seed, kStreamSimFit, rep, k));
            if (opts.progress)
                opts.progress("rep " + std::to_string(rep) + " " + model_name(model) + ": " +
                              (r.by_model[k].ok ? "ok" : ("FAILED " + r.by_model[k].error)));
        }
        report.reps.push_back(r);
        if (use_ckpt) atomic_write_text(ckpt, rep_record_to_json(r, fp).dump(2) + "\n");
    }

    std::sort(report.reps.begin(), report.reps.end(),
              [](const RepRecord& a, const RepRecord& b) { return a.rep < b.rep; });
    for (const auto& r : report.reps)
        for (const auto& m : r.by_model)
            if (!m.ok) ++report.n_failed_fits;
    report.aggregates = aggregate_records(cfg, report.reps);
    return report;
}

}  // namespace cpnlmm
