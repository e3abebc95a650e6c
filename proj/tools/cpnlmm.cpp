// cpnlmm: fit change-point mixed-effects models, run the simulation study,
// and post-process stored results.  Subcommands: fit, simulate, compare,
// diagnose.  Exit codes: 0 ok, 1 usage/config, 2 data, 3 numerical.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cpnlmm/common.hpp"
#include "cpnlmm/data.hpp"
#include "cpnlmm/diagnostics.hpp"
#include "cpnlmm/hierarchy.hpp"
#include "cpnlmm/io.hpp"
#include "cpnlmm/models.hpp"
#include "cpnlmm/rng.hpp"
#include "cpnlmm/sampler.hpp"
#include "cpnlmm/selection.hpp"
#include "cpnlmm/simlab.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace cpnlmm;

struct CommonOpts {
    std::string model = "all";
    std::string data_path;
    std::string config_path;
    std::string out_dir = "cpnlmm_out";
    std::uint64_t seed = 0;
    std::size_t chains = 0;  // 0 = preset value
    std::size_t iters = 0;
    std::size_t warmup = 0;
    std::string interval = "quantile";
    std::string scale = "desk";
    double center_time = 0.0;
    bool has_center_time = false;
    bool dump_draws = false;
    bool demo = false;
};

std::vector<ModelKind> models_from_flag(const std::string& flag) {
    if (flag == "all") return {kAllModels.begin(), kAllModels.end()};
    return {model_from_name(flag)};
}

McmcConfig mcmc_from_opts(const CommonOpts& o) {
    if (o.scale != "desk" && o.scale != "paper")
        throw ConfigError("--scale must be desk or paper");
    McmcConfig cfg = o.scale == "paper" ? McmcConfig::paper_scale() : McmcConfig::desk_scale();
    if (o.chains) cfg.n_chains = o.chains;
    if (o.iters) cfg.n_iters = o.iters;
    if (o.warmup) cfg.n_warmup = o.warmup;
    cfg.seed = o.seed;
    cfg.validate();
    return cfg;
}

// Synthetic word-recall-style panel: ages on [50,90], change point near 68,
// slow exponential decline afterwards.  Purely generated; stands in for the
// access-restricted cohort data in walkthroughs.
LongitudinalDataset make_demo_dataset(std::uint64_t seed) {
    FixedEffects fixed;
    fixed.beta0 = 10.0;
    fixed.beta1 = 0.0;
    fixed.beta2 = 0.08;
    fixed.beta_cp = 68.0;
    fixed.theta_t = 4.0;
    const double sigma = 1.0, w0 = 1.0, w2 = 0.02, wcp = 3.0;

    std::vector<Subject> subjects;
    for (std::size_t i = 0; i < 40; ++i) {
        RandomStream rng(derive_seed(seed, kStreamDemo, i));
        Subject s;
        s.id = "demo" + std::to_string(i + 1);
        s.times.resize(8);
        for (double& t : s.times) t = rng.uniform(50.0, 90.0);
        std::sort(s.times.begin(), s.times.end());
        ThetaIndividual th;
        for (int attempt = 0;; ++attempt) {
            th = individual_params(fixed, rng.normal(0.0, w0), rng.normal(0.0, w2),
                                   rng.normal(0.0, wcp));
            if (th.theta_cp > 50.0 && th.theta_cp < 90.0) break;
            if (attempt > 1000) throw NumericalError("demo generation stuck");
        }
        MeanCurve curve(ModelKind::dem, th);
        s.y.resize(s.times.size());
        for (std::size_t j = 0; j < s.times.size(); ++j)
            s.y[j] = curve(s.times[j]) + rng.normal(0.0, sigma);
        subjects.push_back(std::move(s));
    }
    return LongitudinalDataset(std::move(subjects));
}

LongitudinalDataset shift_times(const LongitudinalDataset& data, double c) {
    std::vector<Subject> subjects = data.subjects();
    for (auto& s : subjects)
        for (double& t : s.times) t -= c;
    return LongitudinalDataset(std::move(subjects));
}

json priors_echo(const PriorConfig& pr) {
    return json{{"beta0", {{"mean", pr.beta0.mean}, {"sd", pr.beta0.sd}}},
                {"beta1", {{"free", pr.beta1_free}, {"mean", pr.beta1.mean}, {"sd", pr.beta1.sd}}},
                {"beta2", {{"mean", pr.beta2.mean}, {"sd", pr.beta2.sd}}},
                {"beta_cp", {{"lo", pr.beta_cp.lo}, {"hi", pr.beta_cp.hi}}},
                {"theta_t", {{"lo", pr.theta_t.lo}, {"hi", pr.theta_t.hi}}},
                {"sigma_eps", {{"scale", pr.sigma_eps.scale}}},
                {"omega0", {{"scale", pr.omega0.scale}}},
                {"omega2", {{"scale", pr.omega2.scale}}},
                {"omega_cp", {{"scale", pr.omega_cp.scale}}}};
}

int cmd_fit(const CommonOpts& o) {
    const fs::path out(o.out_dir);
    fs::create_directories(out);

    LongitudinalDataset raw = [&] {
        if (o.demo) {
            LongitudinalDataset demo = make_demo_dataset(o.seed);
            write_dataset_csv(out / "demo_data.csv", demo);
            std::cout << "demo: wrote synthetic dataset to " << (out / "demo_data.csv").string()
                      << "\n";
            return demo;
        }
        if (o.data_path.empty()) throw ConfigError("fit needs --data <csv> (or --demo)");
        return ingest_csv(o.data_path);
    }();

    const double c = o.has_center_time ? o.center_time : 0.0;
    const LongitudinalDataset data = c != 0.0 ? shift_times(raw, c) : std::move(raw);

    PriorConfig priors = PriorConfig::data_driven(data);
    if (!o.config_path.empty())
        priors = parse_priors(json::parse(read_text_file(o.config_path)), priors);

    const McmcConfig mcmc = mcmc_from_opts(o);
    const IntervalKind ikind = interval_from_name(o.interval);
    const std::vector<ModelKind> models = models_from_flag(o.model);

    std::vector<std::string> names;
    std::vector<double> marginals;
    std::vector<ModelComparisonRow> rows;
    double max_rhat_all = 0.0;
    std::size_t divergences = 0;

    for (ModelKind model : models) {
        const std::string mname = model_name(model);
        PosteriorDraws draws = run_chains(model, data, priors, mcmc);
        if (c != 0.0) {
            // report the change point on the original time scale
            const std::size_t p = draws.param_index("beta_cp");
            for (std::size_t ch = 0; ch < draws.n_chains; ++ch)
                for (std::size_t it = 0; it < draws.n_kept; ++it)
                    draws.draws[ch][it * draws.n_params + p] += c;
        }

        const ChainDiagnostics diag = summarize(draws, 0.95, ikind);
        atomic_write_text(out / ("summary_" + mname + ".csv"), summary_csv(diag));
        atomic_write_text(out / ("summary_" + mname + ".json"),
                          summary_json(diag).dump(2) + "\n");
        if (o.dump_draws) write_draw_dumps(out, "draws_" + mname, draws);

        const WaicResult w = waic(draws.loglik, draws.n_obs);
        PosteriorEval eval(model, data, priors);
        // bridge runs on the fitting time scale; shift the cp column back
        if (c != 0.0) {
            const std::size_t p = draws.param_index("beta_cp");
            for (std::size_t ch = 0; ch < draws.n_chains; ++ch)
                for (std::size_t it = 0; it < draws.n_kept; ++it)
                    draws.draws[ch][it * draws.n_params + p] -= c;
        }
        const BridgeResult bridge =
            bridge_log_marginal(draws, eval, derive_seed(mcmc.seed, kStreamSimFit, 0xB41D6E));

        ModelComparisonRow row;
        row.model = mname;
        row.waic = w.waic;
        row.waic_se = w.se;
        row.log_marginal = bridge.log_marginal;
        row.bridge_iterations = bridge.iterations;
        row.bridge_rel_mcse = bridge.rel_mcse;
        rows.push_back(row);
        names.push_back(mname);
        marginals.push_back(bridge.log_marginal);

        max_rhat_all = std::max(max_rhat_all, diag.max_rhat());
        for (const auto& ci : draws.chain_info) divergences += ci.divergences;

        const ParamSummary& cp = diag.row("beta_cp");
        std::cout << mname << ": beta_cp median " << fmt_g17(cp.median) << " [" << fmt_g17(cp.lo)
                  << ", " << fmt_g17(cp.hi) << "], waic " << fmt_g17(w.waic) << ", log marginal "
                  << fmt_g17(bridge.log_marginal) << "\n";
    }

    ModelComparison cmp =
        posterior_model_probs(names, marginals, uniform_model_prior(names.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        rows[k].prior_prob = cmp.rows[k].prior_prob;
        rows[k].pmp = cmp.rows[k].pmp;
    }
    cmp.rows = rows;
    atomic_write_text(out / "selection.csv", selection_csv(cmp));
    atomic_write_text(out / "selection.json", selection_json(cmp).dump(2) + "\n");

    const bool rhat_warning = max_rhat_all > 1.01;
    if (rhat_warning)
        std::cerr << "warning: max split-Rhat " << fmt_g17(max_rhat_all)
                  << " exceeds 1.01; inspect traces before trusting summaries\n";

    json meta{{"command", "fit"},
              {"models", names},
              {"seed", o.seed},
              {"interval", o.interval},
              {"scale", o.scale},
              {"center_time", o.has_center_time ? json(o.center_time) : json(nullptr)},
              {"demo", o.demo},
              {"rhat_warning", rhat_warning},
              {"max_rhat", max_rhat_all},
              {"divergences", divergences},
              {"n_subjects", data.n_subjects()},
              {"n_obs", data.n_obs()},
              {"mcmc",
               {{"chains", mcmc.n_chains}, {"iters", mcmc.n_iters}, {"warmup", mcmc.n_warmup}}},
              {"priors", priors_echo(priors)}};
    atomic_write_text(out / "fit.json", meta.dump(2) + "\n");
    return 0;
}

int cmd_simulate(const CommonOpts& o) {
    const fs::path out(o.out_dir);
    fs::create_directories(out);

    ScenarioConfig cfg = ScenarioConfig::scenario1();
    if (!o.config_path.empty()) {
        try {
            cfg = json::parse(read_text_file(o.config_path)).get<ScenarioConfig>();
        } catch (const json::exception& e) {
            throw ConfigError("bad scenario config: " + std::string(e.what()));
        }
    }
    cfg.seed = o.seed;

    McmcConfig mcmc = mcmc_from_opts(o);

    ExperimentOptions opts;
    opts.checkpoint_dir = (out / "checkpoints").string();
    opts.progress = [](const std::string& msg) { std::cerr << msg << "\n"; };
    const ExperimentReport report = run_experiment(cfg, mcmc, opts);

    json cfg_json;
    to_json(cfg_json, cfg);
    atomic_write_text(out / "scenario.json", cfg_json.dump(2) + "\n");
    atomic_write_text(out / "report.csv", experiment_report_csv(report));
    atomic_write_text(out / "report.json", experiment_report_json(report).dump(2) + "\n");

    for (const auto& a : report.aggregates)
        std::cout << cfg.name << " " << a.model << ": cp " << fmt_g17(a.est_median) << ", bias "
                  << fmt_g17(a.bias_median) << ", coverage " << fmt_g17(a.coverage) << ", pmp "
                  << fmt_g17(a.mean_pmp) << "\n";
    if (report.n_failed_fits > 0)
        std::cerr << "warning: " << report.n_failed_fits << " fits failed and were excluded\n";
    return 0;
}

int cmd_compare(const CommonOpts& o) {
    if (o.data_path.empty()) throw ConfigError("compare needs --data <selection.json>");
    const fs::path out(o.out_dir);
    fs::create_directories(out);

    ModelComparison stored = load_selection_json(o.data_path);
    std::vector<std::string> names;
    std::vector<double> marginals;
    for (const auto& r : stored.rows) {
        names.push_back(r.model);
        marginals.push_back(r.log_marginal);
    }

    std::vector<double> prior = uniform_model_prior(names.size());
    if (!o.config_path.empty()) {
        json j;
        try {
            j = json::parse(read_text_file(o.config_path));
        } catch (const json::exception& e) {
            throw ConfigError("bad model-prior config: " + std::string(e.what()));
        }
        const json& p = j.contains("priors") ? j["priors"] : j;
        for (std::size_t k = 0; k < names.size(); ++k) {
            if (!p.contains(names[k]))
                throw ConfigError("model-prior config missing entry for '" + names[k] + "'");
            prior[k] = p[names[k]].get<double>();
        }
    }

    ModelComparison cmp = posterior_model_probs(names, marginals, prior);
    for (std::size_t k = 0; k < cmp.rows.size(); ++k) {
        cmp.rows[k].waic = stored.rows[k].waic;
        cmp.rows[k].waic_se = stored.rows[k].waic_se;
    }
    atomic_write_text(out / "selection.csv", selection_csv(cmp));
    atomic_write_text(out / "selection.json", selection_json(cmp).dump(2) + "\n");
    for (const auto& r : cmp.rows)
        std::cout << r.model << ": pmp " << fmt_g17(r.pmp) << " (prior " << fmt_g17(r.prior_prob)
                  << ")\n";
    return 0;
}

int cmd_diagnose(const CommonOpts& o) {
    if (o.data_path.empty()) throw ConfigError("diagnose needs --data <dir with draw dumps>");
    const fs::path in(o.data_path);
    if (!fs::is_directory(in)) throw DataError("'" + in.string() + "' is not a directory");
    const fs::path out(o.out_dir);
    fs::create_directories(out);

    const IntervalKind ikind = interval_from_name(o.interval);
    const std::vector<ModelKind> models = models_from_flag(o.model);
    bool any = false;
    for (ModelKind model : models) {
        const std::string mname = model_name(model);
        std::vector<fs::path> chain_files;
        for (std::size_t chain = 1;; ++chain) {
            fs::path f = in / ("draws_" + mname + "_chain" + std::to_string(chain) + ".csv");
            if (!fs::exists(f)) break;
            chain_files.push_back(f);
        }
        if (chain_files.empty()) continue;
        any = true;
        const PosteriorDraws draws = read_draw_dumps(chain_files);
        const ChainDiagnostics diag = summarize(draws, 0.95, ikind);
        atomic_write_text(out / ("summary_" + mname + ".csv"), summary_csv(diag));
        atomic_write_text(out / ("summary_" + mname + ".json"),
                          summary_json(diag).dump(2) + "\n");
        std::cout << mname << ": " << chain_files.size() << " chains, " << draws.n_kept
                  << " draws/chain, max rhat " << fmt_g17(diag.max_rhat()) << "\n";
    }
    if (!any) throw DataError("no draw dumps found under '" + in.string() + "'");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Bayesian change-point mixed-effects models for longitudinal decline"};
    app.require_subcommand(1);

    CommonOpts o;
    auto add_common = [&](CLI::App* sub, bool needs_seed) {
        sub->add_option("--model", o.model, "bsm|bwm|bcr|dem|all")->default_val("all");
        sub->add_option("--data", o.data_path, "input path (dataset CSV, or command-specific)");
        sub->add_option("--config", o.config_path, "JSON config path");
        auto* seed = sub->add_option("--seed", o.seed, "RNG seed (64-bit)");
        if (needs_seed) seed->required();
        sub->add_option("--out", o.out_dir, "output directory")->default_val("cpnlmm_out");
        sub->add_option("--chains", o.chains, "number of chains");
        sub->add_option("--iters", o.iters, "iterations per chain");
        sub->add_option("--warmup", o.warmup, "warmup iterations");
        sub->add_option("--interval", o.interval, "quantile|hpd")->default_val("quantile");
        sub->add_option("--scale", o.scale, "desk|paper preset")->default_val("desk");
        sub->add_option("--center-time", o.center_time,
                        "subtract this from all times before fitting; estimates are reported "
                        "on the original scale")
            ->each([&](const std::string&) { o.has_center_time = true; });
        sub->add_flag("--dump-draws", o.dump_draws, "write per-chain draw CSVs");
        sub->add_flag("--demo", o.demo, "generate and fit a synthetic demo dataset");
    };

    CLI::App* fit = app.add_subcommand("fit", "fit model(s) to a dataset");
    add_common(fit, true);
    CLI::App* simulate = app.add_subcommand("simulate", "run a simulation scenario");
    add_common(simulate, true);
    CLI::App* compare = app.add_subcommand("compare", "recompute model probabilities");
    add_common(compare, false);
    CLI::App* diagnose = app.add_subcommand("diagnose", "recompute summaries from draw dumps");
    add_common(diagnose, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (fit->parsed()) return cmd_fit(o);
        if (simulate->parsed()) return cmd_simulate(o);
        if (compare->parsed()) return cmd_compare(o);
        if (diagnose->parsed()) return cmd_diagnose(o);
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const cpnlmm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const cpnlmm::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const cpnlmm::NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
