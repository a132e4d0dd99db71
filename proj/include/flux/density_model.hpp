#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include "flux/errors.hpp"

namespace flux {

inline constexpr double kSqrtPi = 1.7724538509055160273;
inline constexpr double kSqrt2Pi = 2.5066282746310005024;

// ---------------------------------------------------------------------------
// Standard normal helpers
// ---------------------------------------------------------------------------

inline double normal_pdf(double x, double mean, double std) {
    const double z = (x - mean) / std;
    return std::exp(-0.5 * z * z) / (kSqrt2Pi * std);
}

inline double normal_cdf(double x, double mean, double std) {
    return 0.5 * std::erfc(-(x - mean) / (std * std::numbers::sqrt2));
}

inline double std_normal_quantile(double p) {
    static const boost::math::normal_distribution<double> unit{};
    return boost::math::quantile(unit, p);
}

/// Standard-normal quantiles at (i - 0.5) / n, i = 1..n. The result is
/// mirrored so that offsets[i] == -offsets[n - 1 - i] holds exactly.
inline std::vector<double> midpoint_quantile_offsets(std::size_t n) {
    if (n == 0) {
        throw ArgumentError("quantile rule needs at least one point");
    }
    std::vector<double> out(n, 0.0);
    const double dn = static_cast<double>(n);
    for (std::size_t i = 0; i < n / 2; ++i) {
        const double z = std_normal_quantile((static_cast<double>(i) + 0.5) / dn);
        out[i] = z;
        out[n - 1 - i] = -z;
    }
    return out;
}

// ---------------------------------------------------------------------------
// GaussianParams
// ---------------------------------------------------------------------------

/// Unnormalized Gaussian k * exp(-(x - m)^2 / (2 sigma^2)).
class GaussianParams {
public:
    GaussianParams(double k, double m, double sigma) : k_(k), m_(m), sigma_(sigma) {
        if (!std::isfinite(k) || !std::isfinite(m) || !std::isfinite(sigma)) {
            throw ArgumentError("GaussianParams: non-finite parameter");
        }
        if (k <= 0.0) {
            throw ArgumentError("GaussianParams: k must be positive");
        }
        if (sigma <= 0.0) {
            throw ArgumentError("GaussianParams: sigma must be positive");
        }
    }

    /// Normalized N(mean, std^2) written in (k, m, sigma) form.
    static GaussianParams normalized(double mean, double std) {
        return {1.0 / (kSqrt2Pi * std), mean, std};
    }

    [[nodiscard]] double k() const { return k_; }
    [[nodiscard]] double m() const { return m_; }
    [[nodiscard]] double sigma() const { return sigma_; }

    bool operator==(const GaussianParams&) const = default;

private:
    double k_;
    double m_;
    double sigma_;
};

inline double eval_gaussian(const GaussianParams& p, double x) {
    const double z = (x - p.m()) / p.sigma();
    return p.k() * std::exp(-0.5 * z * z);
}

// ---------------------------------------------------------------------------
// DiracMixture
// ---------------------------------------------------------------------------

/// Weighted point set with strictly increasing locations.
class DiracMixture {
public:
    DiracMixture(std::vector<double> points, std::vector<double> weights) {
        if (points.size() != weights.size()) {
            throw ArgumentError("DiracMixture: points and weights differ in length");
        }
        std::vector<std::size_t> order(points.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return points[a] < points[b]; });

        points_.reserve(points.size());
        weights_.reserve(points.size());
        for (std::size_t idx : order) {
            const double x = points[idx];
            const double w = weights[idx];
            if (!std::isfinite(x) || !std::isfinite(w)) {
                throw ArgumentError("DiracMixture: non-finite point or weight");
            }
            if (w < 0.0) {
                throw ArgumentError("DiracMixture: negative weight");
            }
            if (!points_.empty() && x == points_.back()) {
                throw ArgumentError("DiracMixture: duplicate point");
            }
            points_.push_back(x);
            weights_.push_back(w);
        }
        total_ = std::accumulate(weights_.begin(), weights_.end(), 0.0);
        if (!std::isfinite(total_)) {
            throw ArgumentError("DiracMixture: total mass is not finite");
        }
    }

    [[nodiscard]] std::span<const double> points() const { return points_; }
    [[nodiscard]] std::span<const double> weights() const { return weights_; }
    [[nodiscard]] std::size_t size() const { return points_.size(); }
    [[nodiscard]] double total_mass() const { return total_; }

private:
    std::vector<double> points_;
    std::vector<double> weights_;
    double total_ = 0.0;
};

struct Moments {
    double mass = 0.0;
    double mean = 0.0;
    double std = 0.0;
};

inline Moments dirac_moments(const DiracMixture& d) {
    const double mass = d.total_mass();
    if (!(mass > 0.0)) {
        throw ArgumentError("dirac_moments: zero total mass");
    }
    const auto xs = d.points();
    const auto ws = d.weights();
    double mean = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) mean += ws[i] * xs[i];
    mean /= mass;
    double var = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mean;
        var += ws[i] * dx * dx;
    }
    return {mass, mean, std::sqrt(var / mass)};
}

/// Point placement for deterministic Dirac mixtures of a Gaussian.
enum class QuadratureRule {
    /// Equal weights at the (i - 0.5) / N quantiles.
    MidpointQuantile,
    /// Gauss-Hermite nodes and weights; exact for polynomials of degree < 2N.
    GaussHermite,
};

struct StandardRule {
    std::vector<double> nodes;
    std::vector<double> weights;  // sum to one
};

/// N-point Gauss-Hermite rule for the standard normal (Golub-Welsch).
/// Rules are computed once per N and shared.
inline const StandardRule& gauss_hermite_rule(std::size_t n) {
    if (n == 0) throw ArgumentError("gauss_hermite_rule: N must be >= 1");
    static std::mutex mutex;
    static std::map<std::size_t, StandardRule> cache;
    std::lock_guard lock(mutex);
    if (auto it = cache.find(n); it != cache.end()) return it->second;

    const auto dim = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(dim, dim);
    for (Eigen::Index i = 1; i < dim; ++i) {
        jacobi(i, i - 1) = jacobi(i - 1, i) = std::sqrt(static_cast<double>(i));
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    StandardRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    for (Eigen::Index i = 0; i < dim; ++i) {
        const auto u = static_cast<std::size_t>(i);
        rule.nodes[u] = eig.eigenvalues()[i];
        rule.weights[u] = eig.eigenvectors()(0, i) * eig.eigenvectors()(0, i);
    }
    // Symmetrize: the rule is exactly symmetric about zero.
    for (std::size_t i = 0; i < n / 2; ++i) {
        const double x = 0.5 * (rule.nodes[n - 1 - i] - rule.nodes[i]);
        const double w = 0.5 * (rule.weights[n - 1 - i] + rule.weights[i]);
        rule.nodes[i] = -x;
        rule.nodes[n - 1 - i] = x;
        rule.weights[i] = rule.weights[n - 1 - i] = w;
    }
    if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
    const double total = std::accumulate(rule.weights.begin(), rule.weights.end(), 0.0);
    for (double& w : rule.weights) w /= total;
    return cache.emplace(n, std::move(rule)).first->second;
}

/// Dirac mixture of f_e^2 for the Gaussian p. The square is a Gaussian with
/// std sigma / sqrt(2) and mass sqrt(pi) k^2 sigma; both rules keep the mass
/// exact.
inline DiracMixture dirac_mixture_of_squared_gaussian(const GaussianParams& p, std::size_t n,
                                                      QuadratureRule rule = QuadratureRule::MidpointQuantile) {
    if (n == 0) {
        throw ArgumentError("dirac_mixture_of_squared_gaussian: N must be >= 1");
    }
    const double mass = kSqrtPi * p.k() * p.k() * p.sigma();
    const double spread = p.sigma() / std::numbers::sqrt2;
    std::vector<double> points(n);
    std::vector<double> weights(n);
    if (rule == QuadratureRule::MidpointQuantile) {
        const auto offsets = midpoint_quantile_offsets(n);
        for (std::size_t i = 0; i < n; ++i) points[i] = p.m() + spread * offsets[i];
        std::fill(weights.begin(), weights.end(), mass / static_cast<double>(n));
    } else {
        const StandardRule& gh = gauss_hermite_rule(n);
        for (std::size_t i = 0; i < n; ++i) {
            points[i] = p.m() + spread * gh.nodes[i];
            weights[i] = mass * gh.weights[i];
        }
    }
    return {std::move(points), std::move(weights)};
}

// ---------------------------------------------------------------------------
// Measurement models
// ---------------------------------------------------------------------------

/// Pointwise measurement map h(x). Keeps the gain when h is linear so the
/// analytic flow can check its applicability.
class MeasurementMap {
public:
    MeasurementMap(std::function<double(double)> fn, std::string name,
                   std::optional<double> linear_gain = std::nullopt)
        : fn_(std::move(fn)), name_(std::move(name)), linear_gain_(linear_gain) {
        if (!fn_) throw ArgumentError("MeasurementMap: empty function");
    }

    static MeasurementMap linear(double gain) {
        if (!std::isfinite(gain)) throw ArgumentError("MeasurementMap: non-finite gain");
        return {[gain](double x) { return gain * x; }, "linear", gain};
    }
    static MeasurementMap quadratic() {
        return {[](double x) { return x * x; }, "quadratic"};
    }
    static MeasurementMap cubic() {
        return {[](double x) { return x * x * x; }, "cubic"};
    }
    static MeasurementMap sine(double frequency) {
        if (!std::isfinite(frequency)) throw ArgumentError("MeasurementMap: non-finite frequency");
        return {[frequency](double x) { return std::sin(frequency * x); }, "sine"};
    }
    static MeasurementMap constant(double c) {
        return {[c](double) { return c; }, "constant"};
    }

    double operator()(double x) const { return fn_(x); }
    [[nodiscard]] const std::string& name() const { return name_; }
    [[nodiscard]] std::optional<double> linear_gain() const { return linear_gain_; }

private:
    std::function<double(double)> fn_;
    std::string name_;
    std::optional<double> linear_gain_;
};

/// y = h(x) + v, v ~ N(0, sigma_v^2). Log-likelihood is constant-free.
struct AdditiveGaussian {
    MeasurementMap h;
    double sigma_v;
    double y;
};

/// y = x v, v ~ N(m_v, sigma_v^2). Normalized.
struct Multiplicative {
    double m_v;
    double sigma_v;
    double y;
};

/// y = x v + w with independent Gaussian v, w. Normalized.
struct MultiplicativeAdditive {
    double m_v;
    double sigma_v;
    double m_w;
    double sigma_w;
    double y;
};

struct GenericLogLikelihood {
    std::function<double(double)> loglik;
};

class MeasurementModel {
public:
    using Variant =
        std::variant<AdditiveGaussian, Multiplicative, MultiplicativeAdditive, GenericLogLikelihood>;

    static MeasurementModel additive(MeasurementMap h, double sigma_v, double y) {
        require_std(sigma_v, "sigma_v");
        require_finite(y, "y");
        return MeasurementModel(AdditiveGaussian{std::move(h), sigma_v, y});
    }
    static MeasurementModel multiplicative(double m_v, double sigma_v, double y) {
        require_finite(m_v, "m_v");
        require_std(sigma_v, "sigma_v");
        require_finite(y, "y");
        return MeasurementModel(Multiplicative{m_v, sigma_v, y});
    }
    static MeasurementModel multiplicative_additive(double m_v, double sigma_v, double m_w,
                                                    double sigma_w, double y) {
        require_finite(m_v, "m_v");
        require_std(sigma_v, "sigma_v");
        require_finite(m_w, "m_w");
        require_std(sigma_w, "sigma_w");
        require_finite(y, "y");
        return MeasurementModel(MultiplicativeAdditive{m_v, sigma_v, m_w, sigma_w, y});
    }
    static MeasurementModel generic(std::function<double(double)> loglik) {
        if (!loglik) throw ArgumentError("MeasurementModel: empty log-likelihood");
        return MeasurementModel(GenericLogLikelihood{std::move(loglik)});
    }

    [[nodiscard]] const Variant& variant() const { return v_; }

    [[nodiscard]] const AdditiveGaussian* as_additive() const {
        return std::get_if<AdditiveGaussian>(&v_);
    }

private:
    explicit MeasurementModel(Variant v) : v_(std::move(v)) {}

    static void require_finite(double v, const char* name) {
        if (!std::isfinite(v)) throw ArgumentError(std::string("MeasurementModel: ") + name + " must be finite");
    }
    static void require_std(double v, const char* name) {
        if (!std::isfinite(v) || v <= 0.0) {
            throw ArgumentError(std::string("MeasurementModel: ") + name + " must be positive");
        }
    }

    Variant v_;
};

namespace detail {
template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;
}  // namespace detail

inline double log_likelihood(const MeasurementModel& model, double x) {
    constexpr double kHalfLog2Pi = 0.91893853320467274178;
    return std::visit(
        detail::overloaded{
            [x](const AdditiveGaussian& a) {
                const double r = (a.y - a.h(x)) / a.sigma_v;
                return -0.5 * r * r;
            },
            [x](const Multiplicative& mu) {
                if (x == 0.0) throw DomainError("likelihood singular at x=0");
                const double z = (mu.y / x - mu.m_v) / mu.sigma_v;
                return -std::log(std::abs(x)) - std::log(mu.sigma_v) - kHalfLog2Pi - 0.5 * z * z;
            },
            [x](const MultiplicativeAdditive& ma) {
                const double s2 = ma.sigma_v * ma.sigma_v * x * x + ma.sigma_w * ma.sigma_w;
                const double r = ma.y - ma.m_v * x - ma.m_w;
                return -kHalfLog2Pi - 0.5 * std::log(s2) - 0.5 * r * r / s2;
            },
            [x](const GenericLogLikelihood& g) { return g.loglik(x); },
        },
        model.variant());
}

}  // namespace flux
