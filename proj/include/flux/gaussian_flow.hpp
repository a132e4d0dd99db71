#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <variant>

#include <Eigen/Dense>

#include "flux/density_model.hpp"
#include "flux/errors.hpp"
#include "flux/progression.hpp"
#include "flux/sode.hpp"

namespace flux {

// Parametric flow of an unnormalized Gaussian f_e(x) = k exp(-(x-m)^2 / (2 s^2))
// under a measurement update. The parameter velocity (kdot, mdot, sdot)
// solves P(eta) etadot = q(eta), where P and q come either from minimizing
// the f_e^2-weighted squared residual of the distributed ODE or from
// enforcing it at collocation points.

/// Integral of (x - m)^n f_e(x)^2 over the real line.
inline double moment_integral(double k, double sigma, unsigned n) {
    if (n % 2 == 1) return 0.0;
    double double_factorial = 1.0;  // (n-1)(n-3)...1
    for (unsigned j = 1; j + 1 <= n; j += 2) double_factorial *= static_cast<double>(j);
    return kSqrtPi * k * k * double_factorial / std::pow(2.0, n / 2) *
           std::pow(sigma, static_cast<double>(n + 1));
}

/// Closed form of the squared-integral normal matrix.
inline Eigen::Matrix3d build_P_integral(const GaussianParams& p) {
    const double k = p.k();
    const double s = p.sigma();
    Eigen::Matrix3d P;
    P << s, 0.0, 0.5 * k,
         0.0, 0.5 * k * k / s, 0.0,
         0.5 * k, 0.0, 0.75 * k * k / s;
    return kSqrtPi * P;
}

/// Analytic right-hand side for h(x) = H x.
inline Eigen::Vector3d build_q_linear(const GaussianParams& p, double H, double y, double sigma_v) {
    if (!(sigma_v > 0.0)) throw ArgumentError("build_q_linear: sigma_v must be positive");
    const double k = p.k();
    const double s = p.sigma();
    const double r = y - H * p.m();
    const double HH = H * H;
    Eigen::Vector3d q;
    q << -0.5 * k * s * (HH * s * s + 2.0 * r * r),
         H * k * k * s * r,
         -0.25 * k * k * (3.0 * HH * s * s + 2.0 * r * r);
    return kSqrtPi / (2.0 * sigma_v * sigma_v) * q;
}

/// Right-hand side with f_e^2 replaced by its N-point Dirac mixture.
inline Eigen::Vector3d build_q_numeric(const GaussianParams& p, const MeasurementModel& model, std::size_t n,
                                       QuadratureRule rule = QuadratureRule::GaussHermite) {
    const auto* add = model.as_additive();
    if (add == nullptr) {
        throw UnsupportedModelError("build_q_numeric: squared-integral quadrature needs an additive Gaussian model");
    }
    const DiracMixture dm = dirac_mixture_of_squared_gaussian(p, n, rule);
    const auto xs = dm.points();
    const auto ws = dm.weights();
    const double s2 = p.sigma() * p.sigma();
    const double s3 = s2 * p.sigma();
    Eigen::Vector3d q = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double r = (add->y - add->h(xs[i])) / add->sigma_v;
        const double d = xs[i] - p.m();
        const double c = ws[i] * r * r;
        q[0] += c / p.k();
        q[1] += c * d / s2;
        q[2] += c * d * d / s3;
    }
    return -0.5 * q;
}

/// Collocation rows [1/k, (x-m)/s^2, (x-m)^2/s^3] at C quantile points of f_e
/// and entries log f_L(x_i) * gdot.
inline LinearSystem collocation_system(const GaussianParams& p, const MeasurementModel& model, std::size_t c,
                                       double gdot = 1.0) {
    if (c < 1) throw ArgumentError("collocation_system: need at least one point");
    const auto offsets = midpoint_quantile_offsets(c);
    const double s = p.sigma();
    LinearSystem sys{Eigen::MatrixXd(static_cast<Eigen::Index>(c), 3),
                     Eigen::VectorXd(static_cast<Eigen::Index>(c))};
    for (std::size_t i = 0; i < c; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const double x = p.m() + s * offsets[i];
        const double d = x - p.m();
        sys.P(row, 0) = 1.0 / p.k();
        sys.P(row, 1) = d / (s * s);
        sys.P(row, 2) = d * d / (s * s * s);
        sys.q[row] = log_likelihood(model, x) * gdot;
    }
    return sys;
}

struct SquaredIntegralAnalytic {
    double H;
};
struct SquaredIntegralNumeric {
    std::size_t points;
    QuadratureRule rule = QuadratureRule::GaussHermite;
};
struct Collocation {
    std::size_t points;
};

using GaussianFlowMethod = std::variant<SquaredIntegralAnalytic, SquaredIntegralNumeric, Collocation>;

struct GaussianFlowSystem {
    GaussianParams prior;
    MeasurementModel model;
    GaussianFlowMethod method;

    void validate() const {
        if (const auto* a = std::get_if<SquaredIntegralAnalytic>(&method)) {
            const auto* add = model.as_additive();
            const auto gain = add ? add->h.linear_gain() : std::nullopt;
            if (!gain || *gain != a->H) {
                throw UnsupportedModelError(
                    "gaussian flow: analytic method requires an additive model with h(x) = H x");
            }
        } else if (const auto* n = std::get_if<SquaredIntegralNumeric>(&method)) {
            if (n->points < 3) throw ConfigError("gaussian flow: quadrature needs N >= 3");
            if (model.as_additive() == nullptr) {
                throw UnsupportedModelError("gaussian flow: numeric quadrature needs an additive model");
            }
        } else if (std::get<Collocation>(method).points < 3) {
            throw ConfigError("gaussian flow: collocation needs C >= 3");
        }
    }
};

struct GaussianFlowResult {
    GaussianParams posterior;
    /// Snapshots of (k, m, sigma).
    FlowTrace trace;
};

/// The system (P, q) at a given state, before the log-parameter change of
/// variables. Exposed for inspection and testing.
inline LinearSystem gaussian_flow_system_at(const GaussianFlowSystem& sys, const ProgressionSchedule& s,
                                            double gamma, const GaussianParams& p) {
    const double gdot = s(gamma).gdot;
    return std::visit(
        detail::overloaded{
            [&](const SquaredIntegralAnalytic& a) {
                const auto* add = sys.model.as_additive();
                return LinearSystem{build_P_integral(p), gdot * build_q_linear(p, a.H, add->y, add->sigma_v)};
            },
            [&](const SquaredIntegralNumeric& n) {
                return LinearSystem{build_P_integral(p), gdot * build_q_numeric(p, sys.model, n.points, n.rule)};
            },
            [&](const Collocation& c) { return collocation_system(p, sys.model, c.points, gdot); },
        },
        sys.method);
}

/// Flows the prior N(m_p, sigma_p^2) to the Gaussian posterior. The mass
/// factor starts at the prior normalization constant. k and sigma are
/// integrated as logarithms so that they stay positive.
inline GaussianFlowResult gaussian_flow_update(const GaussianFlowSystem& sys, const ProgressionSchedule& s,
                                               const SolverConfig& solver) {
    sys.validate();
    const GaussianParams start = GaussianParams::normalized(sys.prior.m(), sys.prior.sigma());

    SodeProblem problem;
    problem.dimension = 3;
    problem.initial = Eigen::Vector3d(std::log(start.k()), start.m(), std::log(start.sigma()));
    problem.assemble = [&](double gamma, const Eigen::VectorXd& z) {
        const double k = std::exp(z[0]);
        const double sigma = std::exp(z[2]);
        if (!(sigma > 0.0) || !std::isfinite(sigma)) {
            throw FlowCollapseError("gaussian flow: sigma left (0, inf) at gamma = " + std::to_string(gamma));
        }
        if (!(k > 0.0) || !std::isfinite(k)) {
            throw FlowCollapseError("gaussian flow: k left (0, inf) at gamma = " + std::to_string(gamma));
        }
        LinearSystem ls = gaussian_flow_system_at(sys, s, gamma, GaussianParams(k, z[1], sigma));
        // d/dgamma (k, m, sigma) = diag(k, 1, sigma) d/dgamma (log k, m, log sigma)
        ls.P.col(0) *= k;
        ls.P.col(2) *= sigma;
        return ls;
    };

    FlowTrace trace = integrate(problem, solver);
    for (auto& snap : trace.snapshots) {
        snap.eta[0] = std::exp(snap.eta[0]);
        snap.eta[2] = std::exp(snap.eta[2]);
    }
    const auto& last = trace.back().eta;
    if (!(last[2] > 0.0) || !(last[0] > 0.0)) throw FlowCollapseError("gaussian flow: degenerate posterior");
    GaussianParams posterior(last[0], last[1], last[2]);
    return {posterior, std::move(trace)};
}

}  // namespace flux
