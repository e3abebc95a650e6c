#include <gtest/gtest.h>

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "cpnlmm/simlab.hpp"

using namespace cpnlmm;
namespace fs = std::filesystem;

namespace {

ScenarioConfig tiny_scenario() {
    ScenarioConfig sc = ScenarioConfig::scenario2();
    sc.n_replications = 2;
    sc.n_subjects = 5;
    sc.n_occasions = 3;
    sc.seed = 777;
    return sc;
}

McmcConfig tiny_mcmc() {
    McmcConfig cfg;
    cfg.n_chains = 2;
    cfg.n_iters = 120;
    cfg.n_warmup = 60;
    cfg.seed = 42;
    return cfg;
}

}  // namespace

TEST(Scenario, FactoriesCarryTheStudySettings) {
    const auto s1 = ScenarioConfig::scenario1();
    EXPECT_EQ(s1.dgp, ModelKind::dem);
    EXPECT_DOUBLE_EQ(s1.beta2, 0.5);
    EXPECT_DOUBLE_EQ(s1.t_max, 20.0);
    EXPECT_EQ(s1.name, "scenario1");

    const auto s2 = ScenarioConfig::scenario2();
    EXPECT_EQ(s2.dgp, ModelKind::bsm);
    EXPECT_DOUBLE_EQ(s2.beta2, -0.5);

    const auto s3 = ScenarioConfig::scenario3();
    EXPECT_EQ(s3.dgp, ModelKind::dem);
    EXPECT_DOUBLE_EQ(s3.t_max, 17.5);
    EXPECT_EQ(s3.name, "scenario3");

    // shared defaults
    for (const auto& s : {s1, s2, s3}) {
        EXPECT_EQ(s.n_replications, 50u);
        EXPECT_EQ(s.n_subjects, 50u);
        EXPECT_EQ(s.n_occasions, 10u);
        EXPECT_DOUBLE_EQ(s.beta0, 11.0);
        EXPECT_DOUBLE_EQ(s.beta1, 0.0);
        EXPECT_DOUBLE_EQ(s.beta_cp, 10.0);
        EXPECT_DOUBLE_EQ(s.theta_t, 3.0);
        EXPECT_DOUBLE_EQ(s.sigma2_eps, 1.4);
        EXPECT_DOUBLE_EQ(s.omega2_0, 0.3);
        EXPECT_DOUBLE_EQ(s.omega2_2, 0.1);
        EXPECT_DOUBLE_EQ(s.omega2_cp, 2.0);
        EXPECT_NO_THROW(s.validate());
    }
}

TEST(Scenario, ValidateRejectsImpossibleSettings) {
    ScenarioConfig sc = ScenarioConfig::scenario1();
    sc.sigma2_eps = 0.0;
    EXPECT_THROW(sc.validate(), ConfigError);

    sc = ScenarioConfig::scenario1();
    sc.beta_cp = 25.0;  // outside the follow-up window
    EXPECT_THROW(sc.validate(), ConfigError);

    sc = ScenarioConfig::scenario1();
    sc.n_subjects = 0;
    EXPECT_THROW(sc.validate(), ConfigError);
}

TEST(Scenario, JsonRoundTripAndFingerprints) {
    ScenarioConfig sc = ScenarioConfig::scenario3();
    sc.n_subjects = 17;
    sc.beta2 = 0.33;
    nlohmann::json j = sc;
    const auto back = j.get<ScenarioConfig>();
    EXPECT_EQ(back.dgp, sc.dgp);
    EXPECT_EQ(back.n_subjects, 17u);
    EXPECT_DOUBLE_EQ(back.beta2, 0.33);
    EXPECT_EQ(back.name, "scenario3");
    EXPECT_EQ(back.seed, sc.seed);

    const McmcConfig mc = tiny_mcmc();
    EXPECT_EQ(sc.fingerprint(mc), back.fingerprint(mc));
    McmcConfig longer = mc;
    longer.n_iters = 500;
    EXPECT_NE(sc.fingerprint(mc), sc.fingerprint(longer));
    ScenarioConfig other = sc;
    other.beta2 = 0.34;
    EXPECT_NE(sc.fingerprint(mc), other.fingerprint(mc));
}

TEST(GenDataset, ShapesIdsAndObservableChangePoints) {
    ScenarioConfig sc = ScenarioConfig::scenario1();
    sc.n_subjects = 12;
    sc.n_occasions = 5;
    const auto gen = gen_dataset(sc, 0);
    EXPECT_EQ(gen.data.n_subjects(), 12u);
    EXPECT_EQ(gen.truth.size(), 12u);
    for (std::size_t i = 0; i < 12; ++i) {
        const Subject& s = gen.data.subjects()[i];
        EXPECT_EQ(s.id, "sim" + std::to_string(i + 1));
        ASSERT_EQ(s.n_obs(), 5u);
        for (std::size_t j = 1; j < 5; ++j) EXPECT_GE(s.times[j], s.times[j - 1]);
        EXPECT_GE(s.times.front(), 0.0);
        EXPECT_LE(s.times.back(), sc.t_max);
        EXPECT_GT(gen.truth[i].theta_cp, 0.0);
        EXPECT_LT(gen.truth[i].theta_cp, sc.t_max);
    }
}

TEST(GenDataset, SameInputsSameData) {
    ScenarioConfig sc = ScenarioConfig::scenario1();
    sc.n_subjects = 6;
    sc.n_occasions = 4;
    const auto a = gen_dataset(sc, 3);
    const auto b = gen_dataset(sc, 3);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(a.data.subjects()[i].times, b.data.subjects()[i].times);
        EXPECT_EQ(a.data.subjects()[i].y, b.data.subjects()[i].y);
    }
    const auto c = gen_dataset(sc, 4);
    bool any_diff = false;
    for (std::size_t i = 0; i < 6; ++i)
        if (a.data.subjects()[i].y != c.data.subjects()[i].y) any_diff = true;
    EXPECT_TRUE(any_diff);
}

TEST(GenDataset, VanishingNoiseReproducesTheMeanCurve) {
    // variances must stay positive, so probe the limit from just inside
    for (ModelKind dgp : {ModelKind::dem, ModelKind::bsm}) {
        ScenarioConfig sc = dgp == ModelKind::dem ? ScenarioConfig::scenario1()
                                                  : ScenarioConfig::scenario2();
        sc.n_subjects = 10;
        sc.n_occasions = 6;
        sc.sigma2_eps = 1e-30;
        sc.omega2_0 = 1e-30;
        sc.omega2_2 = 1e-30;
        sc.omega2_cp = 1e-30;
        const auto gen = gen_dataset(sc, 0);
        for (std::size_t i = 0; i < 10; ++i) {
            const Subject& s = gen.data.subjects()[i];
            MeanCurve curve(dgp, gen.truth[i]);
            for (std::size_t j = 0; j < s.n_obs(); ++j)
                EXPECT_NEAR(s.y[j], curve(s.times[j]), 1e-9);
            // and the subject-level parameters collapse onto the population ones
            EXPECT_NEAR(gen.truth[i].theta_cp, sc.beta_cp, 1e-9);
            EXPECT_NEAR(gen.truth[i].theta0, sc.beta0, 1e-9);
        }
    }
}

TEST(GenDataset, RandomEffectSpreadMatchesTheConfiguredVariances) {
    ScenarioConfig sc = ScenarioConfig::scenario1();
    sc.n_subjects = 10000;
    sc.n_occasions = 2;
    const auto gen = gen_dataset(sc, 0);
    std::vector<double> th0, thcp;
    for (const auto& th : gen.truth) {
        th0.push_back(th.theta0);
        thcp.push_back(th.theta_cp);
    }
    EXPECT_NEAR(sample_mean(th0), sc.beta0, 0.05);
    EXPECT_NEAR(sample_variance(th0), sc.omega2_0, 0.05 * sc.omega2_0);
    // the CP truncation to (0, t_max) clips essentially nothing here
    EXPECT_NEAR(sample_mean(thcp), sc.beta_cp, 0.1);
    EXPECT_NEAR(sample_variance(thcp), sc.omega2_cp, 0.05 * sc.omega2_cp);
}

TEST(CoverageCi, WilsonScoreExamples) {
    const auto none = coverage_ci(0, 10);
    EXPECT_EQ(none.first, 0.0);
    EXPECT_EQ(none.second.first, 0.0);
    EXPECT_NEAR(none.second.second, 0.27753, 1e-4);

    const auto all = coverage_ci(10, 10);
    EXPECT_EQ(all.first, 1.0);
    EXPECT_NEAR(all.second.first, 0.72247, 1e-4);
    EXPECT_EQ(all.second.second, 1.0);

    const auto typical = coverage_ci(920, 1000);
    EXPECT_DOUBLE_EQ(typical.first, 0.92);
    const double z = 1.959963985;
    const double n = 1000.0, p = 0.92, z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (p + z2 / (2.0 * n)) / denom;
    const double half = (z / denom) * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    EXPECT_NEAR(typical.second.first, center - half, 1e-12);
    EXPECT_NEAR(typical.second.second, center + half, 1e-12);
    EXPECT_GT(typical.second.first, 0.88);
    EXPECT_LT(typical.second.second, 0.96);

    EXPECT_THROW(coverage_ci(0, 0), NumericalError);
}

namespace {

RepModelRecord ok_record(double cp_median, double cp_lo, double cp_hi, double waic,
                         double log_marginal) {
    RepModelRecord m;
    m.ok = true;
    m.cp_median = cp_median;
    m.cp_lo = cp_lo;
    m.cp_hi = cp_hi;
    m.waic = waic;
    m.waic_se = 1.0;
    m.log_marginal = log_marginal;
    m.max_rhat = 1.001;
    return m;
}

}  // namespace

TEST(Aggregate, CountsBiasCoverageAndPmpByHand) {
    ScenarioConfig sc = ScenarioConfig::scenario1();  // beta_cp = 10

    std::vector<RepRecord> reps(3);
    // rep 0: all models fit, equal marginals
    reps[0].rep = 0;
    for (std::size_t k = 0; k < 4; ++k)
        reps[0].by_model[k] = ok_record(10.5, 9.0, 11.0, 100.0, -50.0);
    // rep 1: all fit; the first model towers over the rest by log 3
    reps[1].rep = 1;
    for (std::size_t k = 0; k < 4; ++k)
        reps[1].by_model[k] = ok_record(9.5, 9.2, 9.8, 110.0, -50.0);
    reps[1].by_model[0].log_marginal = -50.0 + std::log(3.0);
    // rep 2: one model failed, so the whole rep drops out of the PMP average
    reps[2].rep = 2;
    for (std::size_t k = 0; k < 4; ++k)
        reps[2].by_model[k] = ok_record(11.5, 9.8, 12.4, 90.0, -51.0);
    reps[2].by_model[2].ok = false;
    reps[2].by_model[2].error = "synthetic failure";

    const auto aggs = aggregate_records(sc, reps);
    ASSERT_EQ(aggs.size(), 4u);

    const auto& first = aggs[0];
    EXPECT_EQ(first.model, "bsm");
    EXPECT_EQ(first.n_ok, 3u);
    EXPECT_FALSE(first.degenerate);
    EXPECT_DOUBLE_EQ(first.est_median, 10.5);
    EXPECT_DOUBLE_EQ(first.bias_median, 0.5);
    // interval hits: [9.0,11.0] and [9.8,12.4] straddle 10, [9.2,9.8] misses
    EXPECT_EQ(first.cov_hits, 2u);
    EXPECT_EQ(first.cov_trials, 3u);
    EXPECT_DOUBLE_EQ(first.coverage, 2.0 / 3.0);
    // PMP average over reps 0 and 1 only: (1/4 + 1/2) / 2 for the towering model
    EXPECT_NEAR(first.mean_pmp, 0.375, 1e-12);
    EXPECT_NEAR(aggs[1].mean_pmp, (0.25 + 1.0 / 6.0) / 2.0, 1e-12);
    EXPECT_NEAR(first.mean_waic, 100.0, 1e-12);

    const auto& failed = aggs[2];
    EXPECT_EQ(failed.n_ok, 2u);
    EXPECT_EQ(failed.cov_trials, 2u);

    // aggregation is pure: recomputing from the same rows changes nothing
    const auto again = aggregate_records(sc, reps);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(aggs[k].est_median, again[k].est_median);
        EXPECT_EQ(aggs[k].bias_lo, again[k].bias_lo);
        EXPECT_EQ(aggs[k].mean_pmp, again[k].mean_pmp);
    }
}

TEST(Aggregate, SparseRecordsDegradeGracefully) {
    ScenarioConfig sc = ScenarioConfig::scenario1();
    std::vector<RepRecord> reps(1);
    reps[0].rep = 0;
    for (std::size_t k = 0; k < 4; ++k) reps[0].by_model[k].ok = false;
    reps[0].by_model[1] = ok_record(9.9, 9.0, 10.8, 80.0, -40.0);

    const auto aggs = aggregate_records(sc, reps);
    EXPECT_TRUE(aggs[0].degenerate);
    EXPECT_EQ(aggs[0].n_ok, 0u);
    EXPECT_EQ(aggs[0].mean_pmp, 0.0);  // no rep had all four fits

    // a single record pins the interval to the point estimate
    EXPECT_TRUE(aggs[1].degenerate);
    EXPECT_EQ(aggs[1].n_ok, 1u);
    EXPECT_DOUBLE_EQ(aggs[1].est_lo, 9.9);
    EXPECT_DOUBLE_EQ(aggs[1].est_hi, 9.9);
    EXPECT_EQ(aggs[1].cov_hits, 1u);
}

TEST(RepRecordJson, RoundTripKeepsEveryField) {
    RepRecord r;
    r.rep = 7;
    for (std::size_t k = 0; k < 4; ++k)
        r.by_model[k] = ok_record(10.0 + k, 9.0, 11.0, 100.0 + k, -50.0 - k);
    r.by_model[3].ok = false;
    r.by_model[3].error = "bridge: no convergence";

    const nlohmann::json j = rep_record_to_json(r, 0xDEADBEEF);
    EXPECT_EQ(j.at("fingerprint").get<std::uint64_t>(), 0xDEADBEEFu);
    const RepRecord back = rep_record_from_json(j);
    EXPECT_EQ(back.rep, 7u);
    for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(back.by_model[k].ok, r.by_model[k].ok);
        EXPECT_EQ(back.by_model[k].error, r.by_model[k].error);
        EXPECT_EQ(back.by_model[k].cp_median, r.by_model[k].cp_median);
        EXPECT_EQ(back.by_model[k].cp_lo, r.by_model[k].cp_lo);
        EXPECT_EQ(back.by_model[k].cp_hi, r.by_model[k].cp_hi);
        EXPECT_EQ(back.by_model[k].waic, r.by_model[k].waic);
        EXPECT_EQ(back.by_model[k].waic_se, r.by_model[k].waic_se);
        EXPECT_EQ(back.by_model[k].log_marginal, r.by_model[k].log_marginal);
        EXPECT_EQ(back.by_model[k].max_rhat, r.by_model[k].max_rhat);
    }
}

namespace {

bool reports_equal(const ExperimentReport& a, const ExperimentReport& b) {
    if (a.reps.size() != b.reps.size()) return false;
    for (std::size_t i = 0; i < a.reps.size(); ++i) {
        if (a.reps[i].rep != b.reps[i].rep) return false;
        for (std::size_t k = 0; k < 4; ++k) {
            const auto& x = a.reps[i].by_model[k];
            const auto& y = b.reps[i].by_model[k];
            if (x.ok != y.ok || x.cp_median != y.cp_median || x.cp_lo != y.cp_lo ||
                x.cp_hi != y.cp_hi || x.waic != y.waic || x.log_marginal != y.log_marginal)
                return false;
        }
    }
    return true;
}

}  // namespace

TEST(Experiment, RepeatedRunsAreIdentical) {
    const ScenarioConfig sc = tiny_scenario();
    const McmcConfig mc = tiny_mcmc();
    const auto a = run_experiment(sc, mc);
    const auto b = run_experiment(sc, mc);
    EXPECT_TRUE(reports_equal(a, b));
    EXPECT_EQ(a.reps.size(), 2u);
    EXPECT_EQ(a.n_failed_fits, 0u);
    ASSERT_EQ(a.aggregates.size(), 4u);
    for (const auto& agg : a.aggregates) EXPECT_EQ(agg.n_ok, 2u);
}

TEST(Experiment, CheckpointsResumeAndStaleOnesAreIgnored) {
    const ScenarioConfig sc = tiny_scenario();
    const McmcConfig mc = tiny_mcmc();
    const fs::path dir = fs::temp_directory_path() / "cpnlmm_ckpt_test";
    fs::remove_all(dir);

    ExperimentOptions opts;
    opts.checkpoint_dir = dir.string();
    std::vector<std::string> log;
    opts.progress = [&](const std::string& line) { log.push_back(line); };

    const auto first = run_experiment(sc, mc, opts);
    EXPECT_TRUE(fs::exists(dir / "rep_0.json"));
    EXPECT_TRUE(fs::exists(dir / "rep_1.json"));

    // second run only loads
    log.clear();
    const auto second = run_experiment(sc, mc, opts);
    EXPECT_TRUE(reports_equal(first, second));
    ASSERT_EQ(log.size(), 2u);
    EXPECT_NE(log[0].find("loaded checkpoint"), std::string::npos);

    // deleting one checkpoint refits exactly that replication
    fs::remove(dir / "rep_1.json");
    log.clear();
    const auto third = run_experiment(sc, mc, opts);
    EXPECT_TRUE(reports_equal(first, third));
    EXPECT_NE(log[0].find("loaded checkpoint"), std::string::npos);
    EXPECT_GT(log.size(), 2u);  // rep 1 logged per-model fits again

    // different sampler settings invalidate the stored fingerprints
    McmcConfig longer = mc;
    longer.n_iters = 160;
    log.clear();
    const auto fourth = run_experiment(sc, longer, opts);
    for (const auto& line : log) EXPECT_EQ(line.find("loaded checkpoint"), std::string::npos);
    EXPECT_FALSE(reports_equal(first, fourth));

    fs::remove_all(dir);
}

TEST(Experiment, FitRecoversAnInformativeChangePoint) {
    // low-noise version of the decline scenario; one replication, one model.
    // The tight posterior mixes slowly under blockwise random-walk moves, so
    // this runs well past the desk preset to get all four chains together.
    ScenarioConfig sc = ScenarioConfig::scenario1();
    sc.n_subjects = 40;
    sc.n_occasions = 8;
    sc.sigma2_eps = 0.1;
    sc.omega2_0 = 0.05;
    sc.omega2_2 = 0.01;
    sc.omega2_cp = 0.25;
    sc.seed = 31415;
    const auto gen = gen_dataset(sc, 0);

    McmcConfig cfg;
    cfg.n_chains = 4;
    cfg.n_iters = 16000;
    cfg.n_warmup = 8000;
    const auto rec = fit_one_model(ModelKind::dem, gen.data, cfg, 2718);
    ASSERT_TRUE(rec.ok) << rec.error;
    EXPECT_NEAR(rec.cp_median, sc.beta_cp, 0.5);
    EXPECT_LT(rec.cp_lo, sc.beta_cp + 0.5);
    EXPECT_GT(rec.cp_hi, sc.beta_cp - 0.5);
    EXPECT_LT(rec.cp_hi - rec.cp_lo, 2.0);
    EXPECT_TRUE(std::isfinite(rec.log_marginal));
    EXPECT_LT(rec.max_rhat, 1.2);
}
