#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cpnlmm/hierarchy.hpp"
#include "cpnlmm/rng.hpp"
#include "oracles.hpp"

using namespace cpnlmm;

namespace {

// small fixture dataset: 3 subjects with irregular occasions
LongitudinalDataset tiny_data() {
    std::vector<Subject> subs;
    subs.push_back({"a", {1.0, 4.0, 7.0, 12.0, 15.0, 17.0, 19.0},
                    {11.2, 10.9, 11.1, 10.0, 8.9, 8.1, 7.0}});
    subs.push_back({"b", {2.0, 6.0, 11.0, 16.0}, {10.8, 11.0, 10.2, 8.5}});
    subs.push_back({"c", {0.5, 9.0, 18.0}, {11.5, 11.2, 6.9}});
    return LongitudinalDataset(std::move(subs));
}

std::vector<double> random_u(const ParamLayout& lay, RandomStream& rng) {
    std::vector<double> u(lay.dim());
    for (double& v : u) v = rng.uniform(-2.0, 2.0);
    return u;
}

}  // namespace

TEST(Dataset, ValidatesOnConstruction) {
    auto make = [](std::vector<Subject> subs) { return LongitudinalDataset(std::move(subs)); };
    EXPECT_THROW(make({}), DataError);
    EXPECT_THROW(make({{"a", {1.0, 2.0}, {3.0}}}), DataError);
    EXPECT_THROW(make({{"a", {}, {}}}), DataError);
    // every subject a singleton: not enough for any slope
    EXPECT_THROW(make({{"a", {1.0}, {2.0}}, {"b", {2.0}, {3.0}}}), DataError);
    const double inf = std::numeric_limits<double>::infinity();
    EXPECT_THROW(make({{"a", {1.0, inf}, {2.0, 3.0}}}), DataError);

    const auto d = tiny_data();
    EXPECT_EQ(d.n_subjects(), 3u);
    EXPECT_EQ(d.n_obs(), 14u);
    EXPECT_EQ(d.time_range(), std::make_pair(0.5, 19.0));
}

TEST(IndividualParams, AdditiveComposition) {
    FixedEffects f;
    f.beta0 = 11.0;
    f.beta1 = -0.1;
    f.beta2 = 0.5;
    f.beta_cp = 10.0;
    f.theta_t = 3.0;

    EXPECT_DOUBLE_EQ(individual_params(f, 0.3, 0.0, 0.0).theta0, 11.3);
    EXPECT_DOUBLE_EQ(individual_params(f, 0.0, 0.0, -2.0).theta_cp, 8.0);

    const ThetaIndividual th = individual_params(f, 0.0, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(th.theta0, f.beta0);
    EXPECT_DOUBLE_EQ(th.theta1, f.beta1);
    EXPECT_DOUBLE_EQ(th.theta2, f.beta2);
    EXPECT_DOUBLE_EQ(th.theta_cp, f.beta_cp);
    EXPECT_DOUBLE_EQ(th.theta_t, f.theta_t);
}

TEST(SubjectLoglik, PointValues) {
    ThetaIndividual th;
    th.theta0 = 11.0;
    th.theta2 = -0.5;
    th.theta_cp = 10.0;

    Subject s;
    s.id = "x";
    s.times = {4.0};
    s.y = {bsm_mean(4.0, th)};
    EXPECT_NEAR(log_likelihood_subject(ModelKind::bsm, s, th, 1.0), -0.5 * kLogTwoPi, 1e-12);
    EXPECT_NEAR(-0.5 * kLogTwoPi, -0.91894, 5e-6);

    s.y = {bsm_mean(4.0, th) + 1.0};
    EXPECT_NEAR(log_likelihood_subject(ModelKind::bsm, s, th, 1.0), -0.5 * kLogTwoPi - 0.5,
                1e-12);
}

TEST(SubjectLoglik, MatchesScalarOracle) {
    RandomStream rng(derive_seed(21, kStreamTest, 1));
    ThetaIndividual th;
    th.theta0 = 10.5;
    th.theta1 = -0.05;
    th.theta2 = 0.4;
    th.theta_cp = 9.0;
    th.theta_t = 2.0;

    Subject s;
    s.id = "x";
    for (int j = 0; j < 7; ++j) {
        s.times.push_back(rng.uniform(0.0, 20.0));
        s.y.push_back(rng.uniform(5.0, 12.0));
    }
    const double sigma = 1.3;
    double want = 0.0;
    for (int j = 0; j < 7; ++j)
        want += oracle::normal_logpdf_ref(s.y[j], dem_mean(s.times[j], th), sigma);
    EXPECT_NEAR(log_likelihood_subject(ModelKind::dem, s, th, sigma), want, 1e-12);
}

TEST(Transforms, RoundTripIdentity) {
    RandomStream rng(derive_seed(21, kStreamTest, 2));
    const auto data = tiny_data();
    PriorConfig pr;
    for (ModelKind model : {ModelKind::bsm, ModelKind::dem}) {
        const ParamLayout lay(model, data.n_subjects(), pr);
        for (int i = 0; i < 1000; ++i) {
            const std::vector<double> u = random_u(lay, rng);
            const Constrained c = decode(lay, u);
            const std::vector<double> back = encode(lay, c.fixed, c.var, c.z);
            ASSERT_EQ(back.size(), u.size());
            for (std::size_t k = 0; k < u.size(); ++k) EXPECT_NEAR(back[k], u[k], 1e-12);
        }
    }
}

TEST(Transforms, BoundaryValuesRejected) {
    EXPECT_THROW(unconstrain_interval(0.0, 0.0, 20.0), NumericalError);
    EXPECT_THROW(unconstrain_interval(20.0, 0.0, 20.0), NumericalError);
    EXPECT_THROW(unconstrain_interval(25.0, 0.0, 20.0), NumericalError);
    EXPECT_NEAR(constrain_interval(unconstrain_interval(13.0, 0.0, 20.0), 0.0, 20.0), 13.0,
                1e-12);
}

TEST(LogPrior, SupportAndKnownValues) {
    const auto data = tiny_data();
    PriorConfig pr;
    const ParamLayout lay(ModelKind::dem, data.n_subjects(), pr);

    Constrained c;
    c.fixed = {11.0, 0.0, 0.5, 25.0, 3.0};  // beta_cp outside U(0,20)
    c.var = {1.0, 0.5, 0.3, 1.5};
    c.z.resize(data.n_subjects());
    EXPECT_EQ(log_prior(lay, c, pr), kNegInf);

    c.fixed.beta_cp = 10.0;
    EXPECT_TRUE(std::isfinite(log_prior(lay, c, pr)));

    // half-Cauchy density at the origin is 2/(pi*scale)
    EXPECT_NEAR(half_cauchy_logpdf(0.0, 10.0), std::log(2.0 / (M_PI * 10.0)), 1e-12);
    EXPECT_NEAR(half_cauchy_logpdf(0.0, 10.0), -2.7541678, 5e-7);
}

TEST(LogPrior, MatchesHandAssembledOracle) {
    const auto data = tiny_data();
    PriorConfig pr;
    const ParamLayout lay(ModelKind::dem, data.n_subjects(), pr);

    Constrained c;
    c.fixed = {10.7, 0.0, 0.45, 9.3, 2.6};
    c.var = {1.2, 0.6, 0.25, 1.4};
    c.z = {{0.3, -0.2, 1.1}, {-0.9, 0.4, 0.0}, {1.7, -1.2, 0.8}};

    auto hc = [](double x, double s) {
        return std::log(2.0) - std::log(M_PI) - std::log(s) - std::log(1.0 + (x / s) * (x / s));
    };
    double want = oracle::normal_logpdf_ref(c.fixed.beta0, pr.beta0.mean, pr.beta0.sd) +
                  oracle::normal_logpdf_ref(c.fixed.beta2, pr.beta2.mean, pr.beta2.sd) -
                  std::log(20.0) - std::log(5.0) + hc(c.var.sigma_eps, pr.sigma_eps.scale) +
                  hc(c.var.omega0, pr.omega0.scale) + hc(c.var.omega2, pr.omega2.scale) +
                  hc(c.var.omega_cp, pr.omega_cp.scale);
    for (const auto& z : c.z)
        want += oracle::normal_logpdf_ref(z.z0, 0.0, 1.0) +
                oracle::normal_logpdf_ref(z.z2, 0.0, 1.0) +
                oracle::normal_logpdf_ref(z.zcp, 0.0, 1.0);

    EXPECT_NEAR(log_prior(lay, c, pr), want, 1e-12);
}

TEST(LogPosterior, AdditivityAndFactorization) {
    RandomStream rng(derive_seed(21, kStreamTest, 3));
    const auto data = tiny_data();
    PriorConfig pr;
    for (ModelKind model : kAllModels) {
        const ParamLayout lay(model, data.n_subjects(), pr);
        const std::vector<double> u = random_u(lay, rng);

        const PosteriorParts parts = log_posterior_parts(model, data, lay, u, pr);
        EXPECT_DOUBLE_EQ(parts.total(), log_posterior(model, data, lay, u, pr));

        const Constrained c = decode(lay, u);
        EXPECT_DOUBLE_EQ(parts.logprior, log_prior(lay, c, pr));
        EXPECT_DOUBLE_EQ(parts.logjac, c.log_jacobian);

        // likelihood partition must be exact, not approximate
        const auto cells = per_observation_loglik(model, data, lay, u);
        ASSERT_EQ(cells.size(), data.n_subjects());
        double total = 0.0;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            ASSERT_EQ(cells[i].size(), data.subjects()[i].n_obs());
            double row = 0.0;
            for (double v : cells[i]) row += v;
            total += row;
        }
        EXPECT_EQ(total, parts.loglik);
    }
}

TEST(LogPosterior, PerturbationIsLocal) {
    const auto data = tiny_data();
    PriorConfig pr;
    const ParamLayout lay(ModelKind::bwm, data.n_subjects(), pr);
    RandomStream rng(derive_seed(21, kStreamTest, 4));
    std::vector<double> u = random_u(lay, rng);

    const auto before = per_observation_loglik(ModelKind::bwm, data, lay, u);
    u[lay.i_z(1, 0)] += 0.25;
    const auto after = per_observation_loglik(ModelKind::bwm, data, lay, u);
    for (std::size_t i = 0; i < before.size(); ++i)
        for (std::size_t j = 0; j < before[i].size(); ++j) {
            if (i == 1)
                EXPECT_NE(before[i][j], after[i][j]);
            else
                EXPECT_EQ(before[i][j], after[i][j]);
        }
}

TEST(LogPosterior, SingleObservationShape) {
    std::vector<Subject> subs;
    subs.push_back({"a", {3.0, 5.0}, {10.0, 9.5}});
    const LongitudinalDataset data(std::move(subs));
    PriorConfig pr;
    const ParamLayout lay(ModelKind::bsm, data.n_subjects(), pr);
    RandomStream rng(derive_seed(21, kStreamTest, 5));
    const auto cells = per_observation_loglik(ModelKind::bsm, data, lay, random_u(lay, rng));
    ASSERT_EQ(cells.size(), 1u);
    EXPECT_EQ(cells[0].size(), 2u);
}

TEST(LogPosterior, FiniteDifferenceConverges) {
    // bwm is smooth in every coordinate, so central differences must show
    // second-order convergence under step halving
    const auto data = tiny_data();
    PriorConfig pr;
    const ParamLayout lay(ModelKind::bwm, data.n_subjects(), pr);
    RandomStream rng(derive_seed(21, kStreamTest, 6));

    auto f = [&](const std::vector<double>& u) {
        return log_posterior(ModelKind::bwm, data, lay, u, pr);
    };
    auto central = [&](std::vector<double> u, std::size_t k, double h) {
        u[k] += h;
        const double up = f(u);
        u[k] -= 2.0 * h;
        const double dn = f(u);
        return (up - dn) / (2.0 * h);
    };

    // steps large enough that the h^2 truncation term dwarfs rounding noise
    int informative = 0;
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> u = random_u(lay, rng);
        const std::size_t k = static_cast<std::size_t>(rng.raw() % lay.dim());
        const double d1 = central(u, k, 2e-2);
        const double d2 = central(u, k, 1e-2);
        const double d3 = central(u, k, 5e-3);
        const double e12 = std::fabs(d1 - d2);
        const double e23 = std::fabs(d2 - d3);
        if (e12 < 1e-8) continue;  // curvature too small to resolve the ratio
        ++informative;
        EXPECT_GT(e12 / e23, 2.0) << "rep " << rep;  // exact second order gives 4
    }
    EXPECT_GE(informative, 5);
}

TEST(PosteriorEval, CachedStateMatchesDirectEvaluation) {
    const auto data = tiny_data();
    PriorConfig pr;
    RandomStream rng(derive_seed(21, kStreamTest, 7));
    for (ModelKind model : kAllModels) {
        const PosteriorEval eval(model, data, pr);
        const ParamLayout& lay = eval.layout();
        // interior state with positive dem level, so every model stays finite
        FixedEffects fixed{11.0, 0.0, 0.4, 9.5, 2.5};
        VarianceComponents var{1.2, 0.6, 0.3, 1.4};
        std::vector<ReTriple> z(data.n_subjects());
        for (auto& zi : z) zi = {rng.normal(0.0, 0.8), rng.normal(0.0, 0.8),
                                 rng.normal(0.0, 0.8)};
        std::vector<double> u = encode(lay, fixed, var, z);

        PosteriorEval::State st = eval.make_state(u);
        const double direct = log_posterior(model, data, lay, u, pr);
        EXPECT_NEAR(st.lp, direct, 1e-8 * std::max(1.0, std::fabs(direct)));

        // single-subject refresh must agree with a full rebuild
        st.u[lay.i_z(2, 1)] += 0.4;
        eval.refresh(st, BlockKind::subject, 2);
        const PosteriorEval::State full = eval.make_state(st.u);
        EXPECT_NEAR(st.lp, full.lp, 1e-9 * std::max(1.0, std::fabs(full.lp)));
        for (std::size_t i = 0; i < data.n_subjects(); ++i)
            EXPECT_NEAR(st.ssr[i], full.ssr[i], 1e-9 * std::max(1.0, full.ssr[i]));
    }
}

TEST(PriorConfig, DataDrivenBounds) {
    const auto data = tiny_data();
    const PriorConfig pr = PriorConfig::data_driven(data);
    EXPECT_DOUBLE_EQ(pr.beta_cp.lo, 0.5);
    EXPECT_DOUBLE_EQ(pr.beta_cp.hi, 19.0);
    EXPECT_DOUBLE_EQ(pr.theta_t.lo, 0.0);
    EXPECT_DOUBLE_EQ(pr.theta_t.hi, (19.0 - 0.5) / 4.0);

    PriorConfig bad;
    bad.beta_cp = {5.0, 5.0};
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = PriorConfig{};
    bad.sigma_eps.scale = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}
