#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "cpnlmm/common.hpp"

namespace cpnlmm {

// Four change-point trajectory shapes:
//   bsm - broken stick (piecewise linear, one free knot)
//   bwm - Bacon-Watts (tanh-smoothed slope change)
//   bcr - bent cable (quadratic arc between linear segments)
//   dem - exponential decay driven by a smoothly switched-on rate
enum class ModelKind { bsm, bwm, bcr, dem };

inline constexpr std::array<ModelKind, 4> kAllModels = {ModelKind::bsm, ModelKind::bwm,
                                                        ModelKind::bcr, ModelKind::dem};

inline std::string model_name(ModelKind m) {
    switch (m) {
        case ModelKind::bsm: return "bsm";
        case ModelKind::bwm: return "bwm";
        case ModelKind::bcr: return "bcr";
        case ModelKind::dem: return "dem";
    }
    return "?";
}

inline ModelKind model_from_name(const std::string& s) {
    for (ModelKind m : kAllModels)
        if (model_name(m) == s) return m;
    throw ConfigError("unknown model '" + s + "' (expected bsm|bwm|bcr|dem)");
}

// bsm has no transition parameter; the other three interpret theta_t as a
// width (bwm), half-width (bcr) or window length (dem).
inline bool has_theta_t(ModelKind m) { return m != ModelKind::bsm; }

// Subject-level trajectory parameters.  theta2 is the post-CP slope for
// bsm/bwm/bcr and the (non-negative) long-run decay-rate magnitude for dem.
struct ThetaIndividual {
    double theta0 = 0.0;
    double theta1 = 0.0;
    double theta2 = 0.0;
    double theta_cp = 0.0;
    double theta_t = 0.0;
};

// Below this width the dem transition window is treated as degenerate and the
// cubic solve is skipped (the curve falls back to an instant rate switch).
inline constexpr double kDegenerateWindow = 1e-8;

inline double bsm_mean(double t, const ThetaIndividual& th) {
    if (t <= th.theta_cp) return th.theta0 + th.theta1 * t;
    return th.theta0 + th.theta1 * th.theta_cp + th.theta2 * (t - th.theta_cp);
}

inline double bwm_mean(double t, const ThetaIndividual& th) {
    const double d = t - th.theta_cp;
    // theta_t -> 0 turns tanh into sign and recovers the broken stick
    const double s = th.theta_t > 0.0 ? std::tanh(d / th.theta_t)
                                      : (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
    return th.theta0 + th.theta1 * d + th.theta2 * d * s;
}

inline double bcr_mean(double t, const ThetaIndividual& th) {
    if (th.theta_t > 0.0 && t > th.theta_cp - th.theta_t && t <= th.theta_cp + th.theta_t) {
        const double u = t - th.theta_cp + th.theta_t;
        return th.theta0 + th.theta1 * t + th.theta2 * u * u / (4.0 * th.theta_t);
    }
    if (t <= th.theta_cp) return th.theta0 + th.theta1 * t;
    return th.theta0 + (th.theta1 + th.theta2) * t - th.theta2 * th.theta_cp;
}

// Cubic rate segment p3(t) = a0 + a1 t + a2 t^2 + a3 t^3 joining the pre-CP
// relative slope theta1/theta0 to the long-run rate theta2 with zero
// derivative at both ends of [theta_cp, theta_cp + theta_t].
struct CubicRate {
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    double theta_cp = 0.0;
    double theta_t = 0.0;

    double eval(double t) const { return ((a3 * t + a2) * t + a1) * t + a0; }
    double deriv(double t) const { return (3.0 * a3 * t + 2.0 * a2) * t + a1; }
    // antiderivative in monomial form, used by p3_integral
    double anti(double t) const {
        return (((a3 / 4.0 * t + a2 / 3.0) * t + a1 / 2.0) * t + a0) * t;
    }
};

// Solve the 4x4 Hermite-type system for the cubic coefficients.  Done in long
// double with partial pivoting: the monomial basis at t ~ 20 is conditioned
// badly enough that plain double leaves residuals above 1e-10.
inline CubicRate p3_coefficients(const ThetaIndividual& th) {
    if (!(th.theta_t > kDegenerateWindow / 100.0))
        throw NumericalError("p3_coefficients: transition window too small, system singular");
    if (th.theta0 == 0.0)
        throw NumericalError("p3_coefficients: theta0 must be nonzero");

    const long double c = th.theta_cp;
    const long double e = th.theta_cp + th.theta_t;
    long double aug[4][5] = {
        {1.0L, c, c * c, c * c * c, static_cast<long double>(th.theta1 / th.theta0)},
        {0.0L, 1.0L, 2.0L * c, 3.0L * c * c, 0.0L},
        {1.0L, e, e * e, e * e * e, static_cast<long double>(th.theta2)},
        {0.0L, 1.0L, 2.0L * e, 3.0L * e * e, 0.0L},
    };

    for (int col = 0; col < 4; ++col) {
        int piv = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::fabs(aug[r][col]) > std::fabs(aug[piv][col])) piv = r;
        if (std::fabs(aug[piv][col]) < 1e-30L)
            throw NumericalError("p3_coefficients: singular system");
        if (piv != col)
            for (int k = col; k < 5; ++k) std::swap(aug[piv][k], aug[col][k]);
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            const long double f = aug[r][col] / aug[col][col];
            for (int k = col; k < 5; ++k) aug[r][k] -= f * aug[col][k];
        }
    }

    CubicRate cub;
    cub.a0 = static_cast<double>(aug[0][4] / aug[0][0]);
    cub.a1 = static_cast<double>(aug[1][4] / aug[1][1]);
    cub.a2 = static_cast<double>(aug[2][4] / aug[2][2]);
    cub.a3 = static_cast<double>(aug[3][4] / aug[3][3]);
    cub.theta_cp = th.theta_cp;
    cub.theta_t = th.theta_t;
    return cub;
}

// Piecewise rate: theta1/theta0 at the change point, the cubic across the
// transition window, theta2 beyond it.
inline double rate_fn(double t, const ThetaIndividual& th, const CubicRate& cub) {
    if (t < th.theta_cp) throw NumericalError("rate_fn: t before the change point");
    if (t == th.theta_cp) return th.theta1 / th.theta0;
    if (t <= th.theta_cp + th.theta_t) return cub.eval(t);
    return th.theta2;
}

// Integral of the cubic from theta_cp to t, evaluated from the exact
// antiderivative.
inline double p3_integral(double t, const CubicRate& cub) {
    if (t < cub.theta_cp || t > cub.theta_cp + cub.theta_t)
        throw NumericalError("p3_integral: t outside the transition window");
    return cub.anti(t) - cub.anti(cub.theta_cp);
}

// dem trajectory with the cubic solve and the end-of-window integral cached,
// for repeated evaluation over a subject's time grid.  Invalid parameters
// (theta0 <= 0) yield NaN rather than throwing so samplers can treat such
// proposals as zero-likelihood.
class DemCurve {
  public:
    explicit DemCurve(const ThetaIndividual& th) : th_(th) {
        if (!(th.theta0 > 0.0)) {
            valid_ = false;
            return;
        }
        if (th.theta_t > kDegenerateWindow) {
            cub_ = p3_coefficients(th);
            p3_end_ = p3_integral(th.theta_cp + th.theta_t, cub_);
            degenerate_ = false;
        } else {
            p3_end_ = 0.0;
            degenerate_ = true;
        }
    }

    bool valid() const { return valid_; }

    double operator()(double t) const {
        if (!valid_) return std::numeric_limits<double>::quiet_NaN();
        if (t <= th_.theta_cp) return th_.theta0 + th_.theta1 * (t - th_.theta_cp);
        if (!degenerate_ && t <= th_.theta_cp + th_.theta_t)
            return th_.theta0 * std::exp(-p3_integral(t, cub_));
        return th_.theta0 *
               std::exp(-p3_end_ - th_.theta2 * (t - th_.theta_cp - th_.theta_t));
    }

    const CubicRate& cubic() const { return cub_; }

  private:
    ThetaIndividual th_;
    CubicRate cub_;
    double p3_end_ = 0.0;
    bool degenerate_ = true;
    bool valid_ = true;
};

inline double dem_mean(double t, const ThetaIndividual& th) { return DemCurve(th)(t); }

// Precomputed per-subject evaluator; the sampler builds one per proposal and
// sweeps it across the subject's occasions.
class MeanCurve {
  public:
    MeanCurve(ModelKind model, const ThetaIndividual& th) : model_(model), th_(th) {
        if (model == ModelKind::dem) dem_.emplace(th);
    }

    double operator()(double t) const {
        switch (model_) {
            case ModelKind::bsm: return bsm_mean(t, th_);
            case ModelKind::bwm: return bwm_mean(t, th_);
            case ModelKind::bcr: return bcr_mean(t, th_);
            case ModelKind::dem: return (*dem_)(t);
        }
        return std::numeric_limits<double>::quiet_NaN();
    }

  private:
    ModelKind model_;
    ThetaIndividual th_;
    std::optional<DemCurve> dem_;
};

inline double mean_fn(ModelKind model, double t, const ThetaIndividual& th) {
    return MeanCurve(model, th)(t);
}

inline std::vector<double> mean_fn(ModelKind model, const std::vector<double>& grid,
                                   const ThetaIndividual& th) {
    MeanCurve curve(model, th);
    std::vector<double> out;
    out.reserve(grid.size());
    for (double t : grid) out.push_back(curve(t));
    return out;
}

}  // namespace cpnlmm
