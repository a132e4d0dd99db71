#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <variant>

#include "flux/density_model.hpp"
#include "flux/errors.hpp"

namespace flux {

struct ScheduleValue {
    double g;
    double gdot;
};

/// Monotone map g: [0,1] -> [0,1] with g(0) = 0 and g(1) = 1.
class ProgressionSchedule {
public:
    enum class Kind { Identity, Polynomial };

    ProgressionSchedule() = default;

    static ProgressionSchedule identity() { return {}; }

    static ProgressionSchedule polynomial(double exponent) {
        if (!std::isfinite(exponent) || exponent <= 0.0) {
            throw ArgumentError("ProgressionSchedule: exponent must be positive");
        }
        ProgressionSchedule s;
        s.kind_ = Kind::Polynomial;
        s.exponent_ = exponent;
        return s;
    }

    [[nodiscard]] Kind kind() const { return kind_; }
    [[nodiscard]] double exponent() const { return exponent_; }

    /// For exponents below one, gdot is unbounded at gamma = 0.
    [[nodiscard]] ScheduleValue operator()(double gamma) const {
        if (!(gamma >= 0.0 && gamma <= 1.0)) {
            throw ArgumentError("ProgressionSchedule: gamma outside [0, 1]");
        }
        if (kind_ == Kind::Identity) return {gamma, 1.0};
        return {std::pow(gamma, exponent_), exponent_ * std::pow(gamma, exponent_ - 1.0)};
    }

private:
    Kind kind_ = Kind::Identity;
    double exponent_ = 1.0;
};

inline ScheduleValue schedule_eval(const ProgressionSchedule& s, double gamma) { return s(gamma); }

/// f_L(x)^g(gamma); 1 at gamma = 0 and f_L(x) at gamma = 1.
inline double progressive_likelihood(const MeasurementModel& model, const ProgressionSchedule& s,
                                     double gamma, double x) {
    const double g = s(gamma).g;
    if (g == 0.0) return 1.0;
    return std::exp(g * log_likelihood(model, x));
}

/// Start and end densities of a morph, both evaluable pointwise.
struct MorphPair {
    std::function<double(double)> f0;
    std::function<double(double)> f1;
};

/// Explicit form gdot * (f1 - f0) of the morphing progression. Equal to
/// (gdot / g) (f_gamma - f0) on exact trajectories but regular at gamma = 0.
inline double morph_rhs(const MorphPair& pair, const ProgressionSchedule& s, double gamma, double x) {
    return s(gamma).gdot * (pair.f1(x) - pair.f0(x));
}

/// log f_L(x) * gdot(gamma) * f.
inline double measurement_rhs(const MeasurementModel& model, const ProgressionSchedule& s,
                              double gamma, double x, double f_value) {
    return log_likelihood(model, x) * s(gamma).gdot * f_value;
}

/// Right-hand side of a distributed ODE, tagged by the progression it encodes.
class DodeRhs {
public:
    struct Morph {
        MorphPair pair;
    };
    struct MeasurementUpdate {
        MeasurementModel model;
    };

    static DodeRhs morph(MorphPair pair) {
        if (!pair.f0 || !pair.f1) throw ArgumentError("DodeRhs: morph densities must be set");
        return DodeRhs(Morph{std::move(pair)});
    }
    static DodeRhs measurement_update(MeasurementModel model) {
        return DodeRhs(MeasurementUpdate{std::move(model)});
    }

    [[nodiscard]] bool is_morph() const { return std::holds_alternative<Morph>(v_); }

    [[nodiscard]] const MeasurementModel* model() const {
        const auto* u = std::get_if<MeasurementUpdate>(&v_);
        return u ? &u->model : nullptr;
    }

    /// fdot at (x, gamma) given the current density value f at x.
    double operator()(const ProgressionSchedule& s, double gamma, double x, double f_value) const {
        if (const auto* m = std::get_if<Morph>(&v_)) return morph_rhs(m->pair, s, gamma, x);
        return measurement_rhs(std::get<MeasurementUpdate>(v_).model, s, gamma, x, f_value);
    }

private:
    explicit DodeRhs(std::variant<Morph, MeasurementUpdate> v) : v_(std::move(v)) {}
    std::variant<Morph, MeasurementUpdate> v_;
};

/// Posterior variance of the linear example at artificial time gamma.
inline double exact_linear_variance(double sigma_p, double sigma_v, double gamma) {
    return 1.0 / (1.0 / (sigma_p * sigma_p) + gamma / (sigma_v * sigma_v));
}

}  // namespace flux
