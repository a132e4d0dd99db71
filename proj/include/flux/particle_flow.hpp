#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "flux/density_model.hpp"
#include "flux/errors.hpp"
#include "flux/progression.hpp"
#include "flux/sode.hpp"

namespace flux {

// Nonparametric flow of L equally weighted particles. The density behind the
// particles is reconstructed with a nearest-neighbour spacings estimate at
// each particle and a Gaussian kernel around it,
//
//   f_e(x) = k * sum_i 0.5 w / |x_i - x_j| * exp(-(pi/4) (x - x_i)^2 / (x_i - x_j)^2),
//
// with j = NN(i) and w = 1/L. The distributed ODE is enforced at collocation
// points drawn from every kernel, giving an overdetermined linear system for
// (kdot, xdot_1, ..., xdot_L).

/// Scale factor k plus L distinct particle locations; every particle carries weight 1/L.
class ParticleEnsemble {
public:
    explicit ParticleEnsemble(std::vector<double> locations, double k = 1.0)
        : k_(k), locations_(std::move(locations)) {
        if (locations_.size() < 2) throw ArgumentError("ParticleEnsemble: L >= 2 required");
        if (!std::isfinite(k_) || k_ <= 0.0) throw ArgumentError("ParticleEnsemble: k must be positive");
        for (double x : locations_) {
            if (!std::isfinite(x)) throw ArgumentError("ParticleEnsemble: non-finite location");
        }
        std::vector<double> sorted = locations_;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
            throw ArgumentError("ParticleEnsemble: locations must be pairwise distinct");
        }
    }

    /// L particles at the midpoint quantiles of N(mean, std^2).
    static ParticleEnsemble from_gaussian(double mean, double std, std::size_t count) {
        if (count < 2) throw ArgumentError("ParticleEnsemble: L >= 2 required");
        if (!(std > 0.0)) throw ArgumentError("ParticleEnsemble: std must be positive");
        auto offsets = midpoint_quantile_offsets(count);
        for (double& o : offsets) o = mean + std * o;
        return ParticleEnsemble(std::move(offsets));
    }

    [[nodiscard]] double k() const { return k_; }
    [[nodiscard]] std::span<const double> locations() const { return locations_; }
    [[nodiscard]] std::size_t size() const { return locations_.size(); }
    [[nodiscard]] double weight() const { return 1.0 / static_cast<double>(locations_.size()); }
    [[nodiscard]] double operator[](std::size_t i) const { return locations_[i]; }

private:
    double k_;
    std::vector<double> locations_;
};

/// Nearest neighbour of every particle; ties go to the smaller index.
inline std::vector<std::size_t> nearest_neighbors(std::span<const double> xs) {
    const std::size_t n = xs.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });

    std::vector<std::size_t> nn(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = order[r];
        std::size_t best = n;
        double best_d = 0.0;
        auto consider = [&](std::size_t j) {
            const double d = std::abs(xs[i] - xs[j]);
            if (best == n || d < best_d || (d == best_d && j < best)) {
                best = j;
                best_d = d;
            }
        };
        if (r > 0) consider(order[r - 1]);
        if (r + 1 < n) consider(order[r + 1]);
        nn[i] = best;
    }
    return nn;
}

inline std::size_t nearest_neighbor(const ParticleEnsemble& ens, std::size_t i) {
    if (i >= ens.size()) throw ArgumentError("nearest_neighbor: index out of range");
    return nearest_neighbors(ens.locations())[i];
}

/// 0.5 w / |x_i - x_NN(i)|.
inline double spacings_density(const ParticleEnsemble& ens, std::size_t i) {
    const std::size_t j = nearest_neighbor(ens, i);
    const double d = std::abs(ens[i] - ens[j]);
    if (!(d > 0.0)) throw DegeneracyError("spacings_density: coincident locations");
    return 0.5 * ens.weight() / d;
}

struct KernelComponent {
    std::size_t owner;
    std::size_t neighbor;
    double center;
    /// x_i - x_j, signed.
    double offset;
    double amplitude;
    double sigma;

    [[nodiscard]] double spacing() const { return std::abs(offset); }
};

inline KernelComponent make_component(double xi, double xj, double weight, std::size_t owner = 0,
                                      std::size_t neighbor = 0) {
    const double offset = xi - xj;
    const double d = std::abs(offset);
    if (!(d > 0.0)) throw DegeneracyError("kernel component: coincident locations");
    return {owner, neighbor, xi, offset, 0.5 * weight / d, std::sqrt(2.0 / std::numbers::pi) * d};
}

inline KernelComponent kernel_component(const ParticleEnsemble& ens, std::size_t i) {
    const std::size_t j = nearest_neighbor(ens, i);
    return make_component(ens[i], ens[j], ens.weight(), i, j);
}

inline double kernel_eval(const KernelComponent& c, double x) {
    const double u = (x - c.center) / c.offset;
    return c.amplitude * std::exp(-0.25 * std::numbers::pi * u * u);
}

struct FlowCoefficients {
    double R;  // sensitivity to x_i
    double S;  // sensitivity to x_j
};

/// [R, S] = [1, x, x^2] A_i f_{e,i}(x), where A_i is the 3x2 polynomial
/// coefficient matrix of the kernel's location derivatives.
inline FlowCoefficients flow_coefficients(const KernelComponent& c, double x) {
    constexpr double pi = std::numbers::pi;
    const double xi = c.center;
    const double xj = c.center - c.offset;
    const double d = c.offset;
    const double scale = kernel_eval(c, x) / (2.0 * d * d * d);
    const double a00 = (4.0 + pi) * xi * xj - 2.0 * (xi * xi + xj * xj);
    const double a01 = 2.0 * d * d - pi * xi * xi;
    const double a10 = -pi * (xi + xj);
    const double a11 = 2.0 * pi * xi;
    const double a20 = pi;
    const double a21 = -pi;
    return {scale * (a00 + a10 * x + a20 * x * x), scale * (a01 + a11 * x + a21 * x * x)};
}

inline FlowCoefficients flow_coefficients(const ParticleEnsemble& ens, std::size_t i, double x) {
    return flow_coefficients(kernel_component(ens, i), x);
}

namespace detail {

/// Kernels of all particles for a fixed neighbour graph.
class KernelSet {
public:
    KernelSet(std::span<const double> xs, double k) : k_(k) {
        const auto nn = nearest_neighbors(xs);
        const double w = 1.0 / static_cast<double>(xs.size());
        components_.reserve(xs.size());
        for (std::size_t i = 0; i < xs.size(); ++i) components_.push_back(make_component(xs[i], xs[nn[i]], w, i, nn[i]));
    }

    [[nodiscard]] double density(double x) const {
        double sum = 0.0;
        for (const auto& c : components_) sum += kernel_eval(c, x);
        return k_ * sum;
    }

    /// p(x) = [f_e(x)/k, k (R_1 + T_1), ..., k (R_L + T_L)].
    void p_vector(double x, Eigen::Ref<Eigen::VectorXd> out) const {
        out.setZero();
        double sum = 0.0;
        for (const auto& c : components_) {
            sum += kernel_eval(c, x);
            const FlowCoefficients rs = flow_coefficients(c, x);
            out[static_cast<Eigen::Index>(c.owner) + 1] += rs.R;
            out[static_cast<Eigen::Index>(c.neighbor) + 1] += rs.S;
        }
        out.tail(out.size() - 1) *= k_;
        out[0] = sum;
    }

    [[nodiscard]] const std::vector<KernelComponent>& components() const { return components_; }

private:
    double k_;
    std::vector<KernelComponent> components_;
};

}  // namespace detail

inline double ensemble_density(const ParticleEnsemble& ens, double x) {
    return detail::KernelSet(ens.locations(), ens.k()).density(x);
}

inline Eigen::VectorXd assemble_p_vector(const ParticleEnsemble& ens, double x) {
    Eigen::VectorXd p(static_cast<Eigen::Index>(ens.size()) + 1);
    detail::KernelSet(ens.locations(), ens.k()).p_vector(x, p);
    return p;
}

namespace detail {

inline std::vector<double> collocation_points(const std::vector<KernelComponent>& comps, std::size_t per_kernel) {
    const auto offsets = midpoint_quantile_offsets(per_kernel);
    std::vector<double> pts;
    pts.reserve(comps.size() * per_kernel);
    double lo = comps.front().center;
    double hi = lo;
    for (const auto& c : comps) {
        lo = std::min(lo, c.center);
        hi = std::max(hi, c.center);
        for (double o : offsets) pts.push_back(c.center + c.sigma * o);
    }
    std::sort(pts.begin(), pts.end());
    const double nudge = 1e-9 * (hi - lo);
    for (std::size_t n = 1; n < pts.size(); ++n) {
        if (pts[n] <= pts[n - 1]) pts[n] = pts[n - 1] + nudge;
    }
    return pts;
}

}  // namespace detail

/// Quantile points of every kernel, merged and sorted. Coincident points are
/// nudged apart by 1e-9 of the particle span.
inline std::vector<double> particle_collocation_points(const ParticleEnsemble& ens, std::size_t per_particle) {
    if (per_particle < 1) throw ConfigError("particle collocation: need at least one point per particle");
    if (ens.size() * per_particle < ens.size() + 1) {
        throw ConfigError("particle collocation: C = L * C_per must be >= L + 1");
    }
    return detail::collocation_points(detail::KernelSet(ens.locations(), ens.k()).components(), per_particle);
}

/// Collocation system for (kdot, xdot_1, ..., xdot_L) at the given state.
/// Row n is p(x_n)^T / f_e(x_n) with entry rhs(x_n, f_e(x_n)) / f_e(x_n),
/// i.e. the distributed ODE is enforced in relative (log-density) form.
inline LinearSystem particle_collocation_system(const ParticleEnsemble& ens, const DodeRhs& rhs,
                                                const ProgressionSchedule& s, double gamma,
                                                std::size_t per_particle) {
    const std::size_t L = ens.size();
    if (per_particle < 1 || L * per_particle < L + 1) {
        throw ConfigError("particle flow: C = L * C_per must be >= L + 1");
    }
    const auto n = static_cast<Eigen::Index>(L) + 1;
    const detail::KernelSet kernels(ens.locations(), ens.k());
    const auto pts = detail::collocation_points(kernels.components(), per_particle);
    LinearSystem sys{Eigen::MatrixXd(static_cast<Eigen::Index>(pts.size()), n),
                     Eigen::VectorXd(static_cast<Eigen::Index>(pts.size()))};
    Eigen::VectorXd row(n);
    for (std::size_t c = 0; c < pts.size(); ++c) {
        const auto r = static_cast<Eigen::Index>(c);
        kernels.p_vector(pts[c], row);
        const double f = ens.k() * row[0];
        if (!(f > 0.0)) throw DegeneracyError("particle flow: density vanished at a collocation point");
        sys.P.row(r) = row.transpose() / f;
        sys.q[r] = rhs(s, gamma, pts[c], f) / f;
    }
    return sys;
}

struct ParticleFlowResult {
    ParticleEnsemble ensemble;
    /// Snapshots of (k, x_1, ..., x_L).
    FlowTrace trace;
};

/// Moves the particles from gamma = 0 to 1. Neighbours, kernels and
/// collocation points are rebuilt at every right-hand-side evaluation.
/// Closely spaced particles make the flow stiff; raise the RK4 step count or
/// use the adaptive solver for large L.
inline ParticleFlowResult particle_flow_update(const ParticleEnsemble& ens, const DodeRhs& rhs,
                                               const ProgressionSchedule& s, std::size_t per_particle,
                                               const SolverConfig& solver) {
    const std::size_t L = ens.size();
    if (per_particle < 1 || L * per_particle < L + 1) {
        throw ConfigError("particle flow: C = L * C_per must be >= L + 1");
    }
    const auto n = static_cast<Eigen::Index>(L) + 1;

    SodeProblem problem;
    problem.dimension = n;
    problem.initial.resize(n);
    problem.initial[0] = ens.k();
    for (std::size_t i = 0; i < L; ++i) problem.initial[static_cast<Eigen::Index>(i) + 1] = ens[i];

    problem.assemble = [&, L, n](double gamma, const Eigen::VectorXd& eta) {
        if (!(eta[0] > 0.0)) {
            throw FlowCollapseError("particle flow: mass factor k left (0, inf) at gamma = " + std::to_string(gamma));
        }
        std::vector<double> xs(eta.data() + 1, eta.data() + n);
        std::vector<double> sorted = xs;
        std::sort(sorted.begin(), sorted.end());
        const double span = sorted.back() - sorted.front();
        for (std::size_t r = 1; r < L; ++r) {
            if (!(span > 0.0) || !(sorted[r] - sorted[r - 1] >= 1e-12 * span)) {
                throw DegeneracyError("particle flow: particles collided at gamma = " + std::to_string(gamma));
            }
        }
        return particle_collocation_system(ParticleEnsemble(std::move(xs), eta[0]), rhs, s, gamma, per_particle);
    };

    FlowTrace trace = integrate(problem, solver);
    const auto& last = trace.back().eta;
    if (!(last[0] > 0.0)) throw FlowCollapseError("particle flow: mass factor k left (0, inf)");
    std::vector<double> xs(last.data() + 1, last.data() + n);
    try {
        return {ParticleEnsemble(std::move(xs), last[0]), std::move(trace)};
    } catch (const ArgumentError& e) {
        throw DegeneracyError(std::string("particle flow: invalid final ensemble: ") + e.what());
    }
}

}  // namespace flux
