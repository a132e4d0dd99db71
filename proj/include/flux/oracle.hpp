#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "flux/density_model.hpp"
#include "flux/errors.hpp"

namespace flux {

// Ground truth for checking the flows: the conjugate Gaussian update and a
// brute-force Bayes product on a uniform grid.

struct GaussianMoments {
    double mean;
    double std;
};

inline GaussianMoments kalman_update(double m_p, double sigma_p, double H, double y, double sigma_v) {
    if (!(sigma_p > 0.0) || !(sigma_v > 0.0)) throw ArgumentError("kalman_update: std must be positive");
    const double prec_p = 1.0 / (sigma_p * sigma_p);
    const double prec_v = 1.0 / (sigma_v * sigma_v);
    const double var = 1.0 / (prec_p + H * H * prec_v);
    return {var * (m_p * prec_p + H * y * prec_v), std::sqrt(var)};
}

class GridDensity {
public:
    GridDensity(std::vector<double> xs, std::vector<double> values) : xs_(std::move(xs)), values_(std::move(values)) {
        if (xs_.size() != values_.size()) throw ArgumentError("GridDensity: length mismatch");
        if (xs_.size() < 1000) throw ArgumentError("GridDensity: at least 1000 grid points required");
        for (std::size_t i = 0; i < xs_.size(); ++i) {
            if (i > 0 && !(xs_[i] > xs_[i - 1])) throw ArgumentError("GridDensity: grid not increasing");
            if (!(values_[i] >= 0.0) || !std::isfinite(values_[i])) {
                throw ArgumentError("GridDensity: densities must be finite and nonnegative");
            }
        }
    }

    [[nodiscard]] std::span<const double> xs() const { return xs_; }
    [[nodiscard]] std::span<const double> values() const { return values_; }

    [[nodiscard]] double trapezoid(const std::function<double(double)>& g = {}) const {
        double acc = 0.0;
        for (std::size_t i = 1; i < xs_.size(); ++i) {
            const double a = values_[i - 1] * (g ? g(xs_[i - 1]) : 1.0);
            const double b = values_[i] * (g ? g(xs_[i]) : 1.0);
            acc += 0.5 * (a + b) * (xs_[i] - xs_[i - 1]);
        }
        return acc;
    }

    /// Linear interpolation; zero outside the grid.
    [[nodiscard]] double at(double x) const {
        if (x < xs_.front() || x > xs_.back()) return 0.0;
        const auto it = std::upper_bound(xs_.begin(), xs_.end(), x);
        if (it == xs_.end()) return values_.back();
        const auto hi = static_cast<std::size_t>(it - xs_.begin());
        const std::size_t lo = hi - 1;
        const double t = (x - xs_[lo]) / (xs_[hi] - xs_[lo]);
        return (1.0 - t) * values_[lo] + t * values_[hi];
    }

private:
    std::vector<double> xs_;
    std::vector<double> values_;
};

struct GridPosterior {
    /// mass is the trapezoid integral before normalization.
    Moments moments;
    GridDensity density;
};

inline GridPosterior grid_posterior(const std::function<double(double)>& prior, const MeasurementModel& model,
                                    double lo, double hi, std::size_t n) {
    if (!(lo < hi)) throw ArgumentError("grid_posterior: need lo < hi");
    if (n < 1000) throw ArgumentError("grid_posterior: N >= 1000 required");
    std::vector<double> xs(n);
    std::vector<double> vals(n);
    const double h = (hi - lo) / static_cast<double>(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        xs[i] = i + 1 == n ? hi : lo + h * static_cast<double>(i);
        double ll;
        try {
            ll = log_likelihood(model, xs[i]);
        } catch (const DomainError&) {
            // Singular grid node (x = 0 under purely multiplicative noise).
            ll = -std::numeric_limits<double>::infinity();
        }
        vals[i] = prior(xs[i]) * std::exp(ll);
        if (!std::isfinite(vals[i])) vals[i] = 0.0;
    }
    GridDensity raw(xs, vals);
    const double mass = raw.trapezoid();
    if (!(mass > 0.0)) throw NoOverlapError("grid_posterior: likelihood has no overlap with the prior");
    for (double& v : vals) v /= mass;
    GridDensity density(std::move(xs), std::move(vals));
    const double mean = density.trapezoid([](double x) { return x; });
    const double var = density.trapezoid([mean](double x) { return (x - mean) * (x - mean); });
    return {{mass, mean, std::sqrt(std::max(var, 0.0))}, std::move(density)};
}

/// Kolmogorov-Smirnov statistic of sorted samples against a CDF.
inline double ks_distance(std::span<const double> sorted_samples, const std::function<double(double)>& cdf) {
    if (sorted_samples.empty()) throw ArgumentError("ks_distance: no samples");
    const double n = static_cast<double>(sorted_samples.size());
    double stat = 0.0;
    for (std::size_t i = 0; i < sorted_samples.size(); ++i) {
        const double F = cdf(sorted_samples[i]);
        const double above = static_cast<double>(i + 1) / n;
        const double below = static_cast<double>(i) / n;
        stat = std::max({stat, std::abs(above - F), std::abs(below - F)});
    }
    return stat;
}

}  // namespace flux
