#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "flux/errors.hpp"

namespace flux {

/// Implicit-form velocity equation P * etadot = q; P is m x n with m >= n.
struct LinearSystem {
    Eigen::MatrixXd P;
    Eigen::VectorXd q;
};

struct SodeProblem {
    Eigen::Index dimension = 0;
    Eigen::VectorXd initial;
    std::function<LinearSystem(double gamma, const Eigen::VectorXd& eta)> assemble;
};

struct Rk4Fixed {
    std::size_t steps = 128;
};

struct Rk45Adaptive {
    double rel_tol = 1e-8;
    double abs_tol = 1e-10;
    std::size_t max_steps = 100000;
};

struct SolverConfig {
    std::variant<Rk4Fixed, Rk45Adaptive> method = Rk4Fixed{};
    /// Tikhonov damping of the velocity solve; unset selects
    /// 1e-10 * (1 + max |P_ij|) at every evaluation.
    std::optional<double> damping;
    std::size_t trace_every = 1;

    void validate() const {
        if (const auto* rk4 = std::get_if<Rk4Fixed>(&method)) {
            if (rk4->steps < 1) throw ArgumentError("SolverConfig: steps must be >= 1");
        } else {
            const auto& a = std::get<Rk45Adaptive>(method);
            if (!(a.rel_tol > 0.0) || !(a.abs_tol > 0.0)) {
                throw ArgumentError("SolverConfig: tolerances must be positive");
            }
            if (a.max_steps < 1) throw ArgumentError("SolverConfig: max_steps must be >= 1");
        }
        if (damping && !(*damping >= 0.0 && std::isfinite(*damping))) {
            throw ArgumentError("SolverConfig: damping must be finite and >= 0");
        }
        if (trace_every < 1) throw ArgumentError("SolverConfig: trace_every must be >= 1");
    }
};

struct Snapshot {
    double gamma;
    Eigen::VectorXd eta;
};

struct FlowTrace {
    std::vector<Snapshot> snapshots;
    std::size_t steps = 0;
    std::size_t rhs_evaluations = 0;

    [[nodiscard]] const Snapshot& front() const { return snapshots.front(); }
    [[nodiscard]] const Snapshot& back() const { return snapshots.back(); }
    [[nodiscard]] std::size_t size() const { return snapshots.size(); }
};

/// argmin |P v - q|^2 + damping^2 |v|^2 via column-pivoted QR of the stacked
/// system [P; damping I] v = [q; 0].
inline Eigen::VectorXd lsq_solve(const Eigen::MatrixXd& P, const Eigen::VectorXd& q, double damping) {
    const Eigen::Index m = P.rows();
    const Eigen::Index n = P.cols();
    if (m < n) throw ArgumentError("lsq_solve: system has fewer rows than unknowns");
    if (q.size() != m) throw ArgumentError("lsq_solve: right-hand side has wrong length");
    if (damping < 0.0) throw ArgumentError("lsq_solve: negative damping");

    if (damping == 0.0) {
        Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(P);
        if (qr.rank() < n) throw SingularSystemError("lsq_solve: rank-deficient system");
        return qr.solve(q);
    }
    Eigen::MatrixXd A(m + n, n);
    A.topRows(m) = P;
    A.bottomRows(n) = damping * Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(m + n);
    b.head(m) = q;
    return Eigen::ColPivHouseholderQR<Eigen::MatrixXd>(A).solve(b);
}

inline double default_damping(const Eigen::MatrixXd& P) {
    return 1e-10 * (1.0 + (P.size() > 0 ? P.cwiseAbs().maxCoeff() : 0.0));
}

namespace detail {

class VelocityField {
public:
    VelocityField(const SodeProblem& problem, const SolverConfig& cfg, std::size_t& evaluations)
        : problem_(problem), cfg_(cfg), evaluations_(evaluations) {}

    Eigen::VectorXd operator()(double gamma, const Eigen::VectorXd& eta) const {
        if (!eta.allFinite()) throw DivergenceError("integrate: state became non-finite", gamma);
        ++evaluations_;
        const LinearSystem sys = problem_.assemble(gamma, eta);
        if (sys.P.cols() != problem_.dimension) {
            throw ArgumentError("integrate: assembled matrix has wrong column count");
        }
        if (!sys.P.allFinite() || !sys.q.allFinite()) {
            throw DivergenceError("integrate: assembled system is non-finite", gamma);
        }
        Eigen::VectorXd v;
        if (cfg_.damping) {
            try {
                v = lsq_solve(sys.P, sys.q, *cfg_.damping);
            } catch (const SingularSystemError&) {
                v = lsq_solve(sys.P, sys.q, default_damping(sys.P));
            }
        } else {
            v = lsq_solve(sys.P, sys.q, default_damping(sys.P));
        }
        if (!v.allFinite()) throw DivergenceError("integrate: velocity is non-finite", gamma);
        return v;
    }

private:
    const SodeProblem& problem_;
    const SolverConfig& cfg_;
    std::size_t& evaluations_;
};

inline FlowTrace integrate_rk4(const SodeProblem& problem, const SolverConfig& cfg, const Rk4Fixed& rk4) {
    FlowTrace trace;
    VelocityField f(problem, cfg, trace.rhs_evaluations);
    Eigen::VectorXd eta = problem.initial;
    const double h = 1.0 / static_cast<double>(rk4.steps);
    const double dn = static_cast<double>(rk4.steps);
    trace.snapshots.push_back({0.0, eta});

    for (std::size_t j = 0; j < rk4.steps; ++j) {
        const double g0 = static_cast<double>(j) / dn;
        const double gm = (static_cast<double>(j) + 0.5) / dn;
        const double g1 = static_cast<double>(j + 1) / dn;
        const Eigen::VectorXd k1 = f(g0, eta);
        const Eigen::VectorXd k2 = f(gm, eta + 0.5 * h * k1);
        const Eigen::VectorXd k3 = f(gm, eta + 0.5 * h * k2);
        const Eigen::VectorXd k4 = f(g1, eta + h * k3);
        eta += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!eta.allFinite()) throw DivergenceError("integrate: state became non-finite", g1);
        ++trace.steps;
        if ((j + 1) % cfg.trace_every == 0 || j + 1 == rk4.steps) trace.snapshots.push_back({g1, eta});
    }
    return trace;
}

// Dormand-Prince 5(4) with the 5th-order solution propagated.
inline FlowTrace integrate_rk45(const SodeProblem& problem, const SolverConfig& cfg,
                                const Rk45Adaptive& opt) {
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                            a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // b - b_hat
    static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920,
                            e5 = -17253.0 / 339200, e6 = 22.0 / 525, e7 = -1.0 / 40;

    FlowTrace trace;
    VelocityField f(problem, cfg, trace.rhs_evaluations);
    Eigen::VectorXd eta = problem.initial;
    trace.snapshots.push_back({0.0, eta});

    double gamma = 0.0;
    double h = 1.0 / 64.0;
    constexpr double kMinStep = 1e-14;
    Eigen::VectorXd k1 = f(gamma, eta);
    std::size_t attempts = 0;

    while (gamma < 1.0) {
        if (++attempts > opt.max_steps) {
            throw StiffnessError("integrate: adaptive step budget exhausted before gamma = 1");
        }
        const bool last = gamma + h >= 1.0;
        if (last) h = 1.0 - gamma;

        const Eigen::VectorXd k2 = f(gamma + c2 * h, eta + h * (a21 * k1));
        const Eigen::VectorXd k3 = f(gamma + c3 * h, eta + h * (a31 * k1 + a32 * k2));
        const Eigen::VectorXd k4 = f(gamma + c4 * h, eta + h * (a41 * k1 + a42 * k2 + a43 * k3));
        const Eigen::VectorXd k5 =
            f(gamma + c5 * h, eta + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
        const double g_end = last ? 1.0 : gamma + h;
        const Eigen::VectorXd k6 =
            f(g_end, eta + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
        const Eigen::VectorXd next = eta + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
        const Eigen::VectorXd k7 = f(g_end, next);
        const Eigen::VectorXd err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

        double err_norm = 0.0;
        for (Eigen::Index i = 0; i < err.size(); ++i) {
            const double scale =
                opt.abs_tol + opt.rel_tol * std::max(std::abs(eta[i]), std::abs(next[i]));
            err_norm = std::max(err_norm, std::abs(err[i]) / scale);
        }
        if (!std::isfinite(err_norm)) throw DivergenceError("integrate: error estimate non-finite", gamma);

        if (err_norm <= 1.0) {
            gamma = g_end;
            eta = next;
            k1 = k7;
            ++trace.steps;
            if (gamma >= 1.0 || trace.steps % cfg.trace_every == 0) trace.snapshots.push_back({gamma, eta});
        }
        const double factor =
            err_norm == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err_norm, -0.2), 0.2, 5.0);
        if (gamma < 1.0) {
            h *= factor;
            if (h < kMinStep) throw StiffnessError("integrate: adaptive step size underflow");
        }
    }
    return trace;
}

}  // namespace detail

/// Integrates P(gamma, eta) etadot = q(gamma, eta) from gamma = 0 to 1.
inline FlowTrace integrate(const SodeProblem& problem, const SolverConfig& cfg) {
    cfg.validate();
    if (!problem.assemble) throw ArgumentError("integrate: problem has no assemble function");
    if (problem.initial.size() != problem.dimension) {
        throw ArgumentError("integrate: initial state has wrong dimension");
    }
    if (const auto* rk4 = std::get_if<Rk4Fixed>(&cfg.method)) return detail::integrate_rk4(problem, cfg, *rk4);
    return detail::integrate_rk45(problem, cfg, std::get<Rk45Adaptive>(cfg.method));
}

}  // namespace flux
