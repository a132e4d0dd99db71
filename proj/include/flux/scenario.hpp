#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "flux/density_model.hpp"
#include "flux/errors.hpp"
#include "flux/gaussian_flow.hpp"
#include "flux/oracle.hpp"
#include "flux/particle_flow.hpp"
#include "flux/progression.hpp"
#include "flux/sode.hpp"

namespace flux {

// Scenario documents (YAML, `version: flux/1`) and the report/trace writers
// behind the `flux` command-line tool.

inline constexpr const char* kScenarioVersion = "flux/1";

/// Invalid scenario document. Carries the offending field and its line.
class ScenarioError : public Error {
public:
    ScenarioError(std::string field, int line, const std::string& msg)
        : Error("scenario: " + field + (line > 0 ? " (line " + std::to_string(line) + ")" : "") + ": " + msg),
          field_(std::move(field)),
          line_(line) {}

    [[nodiscard]] const std::string& field() const { return field_; }
    [[nodiscard]] int line() const { return line_; }

private:
    std::string field_;
    int line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

enum class Method { GaussianAnalytic, GaussianNumeric, GaussianCollocation, ParticleFlow, Morph };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::GaussianAnalytic: return "gaussian-analytic";
        case Method::GaussianNumeric: return "gaussian-numeric";
        case Method::GaussianCollocation: return "gaussian-collocation";
        case Method::ParticleFlow: return "particle-flow";
        case Method::Morph: return "morph";
    }
    return "?";
}

inline bool is_particle_method(Method m) { return m == Method::ParticleFlow || m == Method::Morph; }

struct MapSpec {
    enum class Kind { Linear, Quadratic, Cubic, Sine };
    Kind kind = Kind::Linear;
    double gain = 1.0;
    double frequency = 1.0;

    [[nodiscard]] MeasurementMap build() const {
        switch (kind) {
            case Kind::Linear: return MeasurementMap::linear(gain);
            case Kind::Quadratic: return MeasurementMap::quadratic();
            case Kind::Cubic: return MeasurementMap::cubic();
            case Kind::Sine: return MeasurementMap::sine(frequency);
        }
        return MeasurementMap::linear(gain);
    }
};

struct MeasurementSpec {
    enum class Kind { Additive, Multiplicative, MultiplicativeAdditive };
    Kind kind = Kind::Additive;
    MapSpec h;
    double y = 0.0;
    double sigma_v = 1.0;
    double m_v = 0.0;
    double m_w = 0.0;
    double sigma_w = 1.0;

    [[nodiscard]] MeasurementModel build() const {
        switch (kind) {
            case Kind::Additive: return MeasurementModel::additive(h.build(), sigma_v, y);
            case Kind::Multiplicative: return MeasurementModel::multiplicative(m_v, sigma_v, y);
            case Kind::MultiplicativeAdditive:
                return MeasurementModel::multiplicative_additive(m_v, sigma_v, m_w, sigma_w, y);
        }
        return MeasurementModel::additive(h.build(), sigma_v, y);
    }

    [[nodiscard]] bool is_linear_additive() const {
        return kind == Kind::Additive && h.kind == MapSpec::Kind::Linear;
    }
};

struct PriorSpec {
    std::optional<double> mean;
    std::optional<double> std;
    std::optional<std::size_t> particle_count;
    std::optional<std::vector<double>> particles;
};

struct MixtureComponent {
    double weight;
    double mean;
    double std;
};

/// Normalized Gaussian mixture; a single component is a plain Gaussian.
struct MorphTarget {
    std::vector<MixtureComponent> components;

    [[nodiscard]] double pdf(double x) const {
        double acc = 0.0;
        for (const auto& c : components) acc += c.weight * normal_pdf(x, c.mean, c.std);
        return acc;
    }
    [[nodiscard]] double cdf(double x) const {
        double acc = 0.0;
        for (const auto& c : components) acc += c.weight * normal_cdf(x, c.mean, c.std);
        return acc;
    }
    [[nodiscard]] GaussianMoments moments() const {
        double mean = 0.0;
        double second = 0.0;
        for (const auto& c : components) {
            mean += c.weight * c.mean;
            second += c.weight * (c.std * c.std + c.mean * c.mean);
        }
        return {mean, std::sqrt(std::max(second - mean * mean, 0.0))};
    }
};

struct Scenario {
    std::string version = kScenarioVersion;
    Method method = Method::GaussianAnalytic;
    PriorSpec prior;
    std::optional<MeasurementSpec> measurement;
    ProgressionSchedule schedule;
    SolverConfig solver;
    std::size_t quadrature_points = 200;
    QuadratureRule quadrature_rule = QuadratureRule::GaussHermite;
    std::size_t collocation_points = 64;
    std::size_t points_per_particle = 3;
    std::optional<MorphTarget> morph_target;
    bool oracle = true;
    std::size_t grid_points = 10000;
};

namespace detail {

inline int line_of(const YAML::Node& n) { return n.Mark().line >= 0 ? n.Mark().line + 1 : 0; }

[[noreturn]] inline void scenario_fail(const std::string& field, const YAML::Node& n, const std::string& msg) {
    throw ScenarioError(field, line_of(n), msg);
}

inline std::string join(const std::string& base, const std::string& key) {
    return base.empty() ? key : base + "." + key;
}

inline void reject_unknown_keys(const YAML::Node& map, const std::string& path, std::set<std::string> allowed) {
    for (const auto& kv : map) {
        const auto key = kv.first.as<std::string>();
        if (!allowed.contains(key)) scenario_fail(join(path, key), kv.first, "unknown field");
    }
}

inline YAML::Node require_map(const YAML::Node& parent, const std::string& key, const std::string& path) {
    const YAML::Node n = parent[key];
    if (!n) scenario_fail(join(path, key), parent, "missing required field");
    if (!n.IsMap()) scenario_fail(join(path, key), n, "expected a mapping");
    return n;
}

template <class T>
T scalar_as(const YAML::Node& n, const std::string& field, const char* what) {
    if (!n.IsScalar()) scenario_fail(field, n, std::string("expected ") + what);
    try {
        return n.as<T>();
    } catch (const YAML::Exception&) {
        scenario_fail(field, n, std::string("expected ") + what);
    }
}

inline std::optional<double> opt_double(const YAML::Node& parent, const std::string& key, const std::string& path) {
    const YAML::Node n = parent[key];
    if (!n) return std::nullopt;
    const double v = scalar_as<double>(n, join(path, key), "a number");
    if (!std::isfinite(v)) scenario_fail(join(path, key), n, "must be finite");
    return v;
}

inline double req_double(const YAML::Node& parent, const std::string& key, const std::string& path) {
    const auto v = opt_double(parent, key, path);
    if (!v) scenario_fail(join(path, key), parent, "missing required field");
    return *v;
}

inline double positive(const YAML::Node& parent, const std::string& key, const std::string& path, double v) {
    if (!(v > 0.0)) scenario_fail(join(path, key), parent[key] ? parent[key] : parent, "must be > 0");
    return v;
}

inline std::optional<std::size_t> opt_count(const YAML::Node& parent, const std::string& key,
                                            const std::string& path) {
    const YAML::Node n = parent[key];
    if (!n) return std::nullopt;
    const auto v = scalar_as<long long>(n, join(path, key), "an integer");
    if (v < 0) scenario_fail(join(path, key), n, "must be nonnegative");
    return static_cast<std::size_t>(v);
}

inline std::optional<std::string> opt_string(const YAML::Node& parent, const std::string& key,
                                             const std::string& path) {
    const YAML::Node n = parent[key];
    if (!n) return std::nullopt;
    return scalar_as<std::string>(n, join(path, key), "a string");
}

inline MapSpec parse_map(const YAML::Node& node, const std::string& path) {
    MapSpec h;
    if (node.IsScalar()) {
        const auto kind = node.as<std::string>();
        if (kind == "linear") return h;
        if (kind == "quadratic") h.kind = MapSpec::Kind::Quadratic;
        else if (kind == "cubic") h.kind = MapSpec::Kind::Cubic;
        else scenario_fail(path, node, "unknown measurement map '" + kind + "' (or it needs parameters)");
        return h;
    }
    if (!node.IsMap()) scenario_fail(path, node, "expected a mapping");
    reject_unknown_keys(node, path, {"kind", "H", "frequency"});
    const auto kind = opt_string(node, "kind", path);
    if (!kind) scenario_fail(join(path, "kind"), node, "missing required field");
    if (*kind == "linear") {
        h.kind = MapSpec::Kind::Linear;
        h.gain = opt_double(node, "H", path).value_or(1.0);
    } else if (*kind == "quadratic") {
        h.kind = MapSpec::Kind::Quadratic;
    } else if (*kind == "cubic") {
        h.kind = MapSpec::Kind::Cubic;
    } else if (*kind == "sine") {
        h.kind = MapSpec::Kind::Sine;
        h.frequency = opt_double(node, "frequency", path).value_or(1.0);
    } else {
        scenario_fail(join(path, "kind"), node["kind"], "unknown measurement map '" + *kind + "'");
    }
    return h;
}

inline MeasurementSpec parse_measurement(const YAML::Node& node, const std::string& path) {
    reject_unknown_keys(node, path, {"model", "h", "y", "sigma_v", "m_v", "m_w", "sigma_w"});
    MeasurementSpec m;
    const std::string model = opt_string(node, "model", path).value_or("additive");
    m.y = req_double(node, "y", path);
    if (model == "additive") {
        m.kind = MeasurementSpec::Kind::Additive;
        if (node["h"]) m.h = parse_map(node["h"], join(path, "h"));
        m.sigma_v = positive(node, "sigma_v", path, req_double(node, "sigma_v", path));
    } else if (model == "multiplicative") {
        m.kind = MeasurementSpec::Kind::Multiplicative;
        m.m_v = opt_double(node, "m_v", path).value_or(0.0);
        m.sigma_v = positive(node, "sigma_v", path, req_double(node, "sigma_v", path));
    } else if (model == "multiplicative-additive") {
        m.kind = MeasurementSpec::Kind::MultiplicativeAdditive;
        m.m_v = opt_double(node, "m_v", path).value_or(0.0);
        m.sigma_v = positive(node, "sigma_v", path, req_double(node, "sigma_v", path));
        m.m_w = opt_double(node, "m_w", path).value_or(0.0);
        m.sigma_w = positive(node, "sigma_w", path, req_double(node, "sigma_w", path));
    } else {
        scenario_fail(join(path, "model"), node["model"], "unknown measurement model '" + model + "'");
    }
    return m;
}

inline MorphTarget parse_target(const YAML::Node& node, const std::string& path) {
    MorphTarget t;
    if (node["components"]) {
        reject_unknown_keys(node, path, {"components"});
        const YAML::Node list = node["components"];
        const std::string lpath = join(path, "components");
        if (!list.IsSequence() || list.size() == 0) scenario_fail(lpath, list, "expected a non-empty list");
        double total = 0.0;
        for (std::size_t i = 0; i < list.size(); ++i) {
            const YAML::Node c = list[i];
            const std::string cpath = lpath + "[" + std::to_string(i) + "]";
            if (!c.IsMap()) scenario_fail(cpath, c, "expected a mapping");
            reject_unknown_keys(c, cpath, {"weight", "mean", "std"});
            const double w = opt_double(c, "weight", cpath).value_or(1.0);
            if (!(w > 0.0)) scenario_fail(join(cpath, "weight"), c, "must be > 0");
            t.components.push_back(
                {w, req_double(c, "mean", cpath), positive(c, "std", cpath, req_double(c, "std", cpath))});
            total += w;
        }
        for (auto& c : t.components) c.weight /= total;
    } else {
        reject_unknown_keys(node, path, {"mean", "std"});
        t.components.push_back(
            {1.0, req_double(node, "mean", path), positive(node, "std", path, req_double(node, "std", path))});
    }
    return t;
}

inline SolverConfig parse_solver(const YAML::Node& node, const std::string& path) {
    reject_unknown_keys(node, path, {"method", "steps", "rel_tol", "abs_tol", "max_steps", "damping", "trace_every"});
    SolverConfig cfg;
    const std::string method = opt_string(node, "method", path).value_or("rk4");
    if (method == "rk4") {
        Rk4Fixed rk4;
        if (auto steps = opt_count(node, "steps", path)) {
            if (*steps < 1) scenario_fail(join(path, "steps"), node["steps"], "must be >= 1");
            rk4.steps = *steps;
        }
        cfg.method = rk4;
    } else if (method == "rk45") {
        Rk45Adaptive a;
        if (auto v = opt_double(node, "rel_tol", path)) a.rel_tol = positive(node, "rel_tol", path, *v);
        if (auto v = opt_double(node, "abs_tol", path)) a.abs_tol = positive(node, "abs_tol", path, *v);
        if (auto v = opt_count(node, "max_steps", path)) {
            if (*v < 1) scenario_fail(join(path, "max_steps"), node["max_steps"], "must be >= 1");
            a.max_steps = *v;
        }
        cfg.method = a;
    } else {
        scenario_fail(join(path, "method"), node["method"], "unknown solver '" + method + "'");
    }
    if (auto d = opt_double(node, "damping", path)) {
        if (*d < 0.0) scenario_fail(join(path, "damping"), node["damping"], "must be >= 0");
        cfg.damping = *d;
    }
    if (auto t = opt_count(node, "trace_every", path)) {
        if (*t < 1) scenario_fail(join(path, "trace_every"), node["trace_every"], "must be >= 1");
        cfg.trace_every = *t;
    }
    return cfg;
}

}  // namespace detail

/// Parses and validates a scenario document; unset fields take their defaults.
inline Scenario parse_scenario(const std::string& text) {
    using namespace detail;
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ScenarioError("<document>", e.mark.line + 1, e.msg);
    }
    if (!root || !root.IsMap()) throw ScenarioError("<document>", 0, "expected a mapping at top level");
    reject_unknown_keys(root, "",
                        {"version", "method", "prior", "measurement", "schedule", "solver", "quadrature",
                         "collocation", "morph_target", "oracle", "seed"});

    Scenario s;
    const auto version = opt_string(root, "version", "");
    if (!version) scenario_fail("version", root, "missing required field");
    if (*version != kScenarioVersion) scenario_fail("version", root["version"], "unsupported version '" + *version + "'");

    const auto method = opt_string(root, "method", "");
    if (!method) scenario_fail("method", root, "missing required field");
    if (*method == "gaussian-analytic") s.method = Method::GaussianAnalytic;
    else if (*method == "gaussian-numeric") s.method = Method::GaussianNumeric;
    else if (*method == "gaussian-collocation") s.method = Method::GaussianCollocation;
    else if (*method == "particle-flow") s.method = Method::ParticleFlow;
    else if (*method == "morph") s.method = Method::Morph;
    else scenario_fail("method", root["method"], "unknown method '" + *method + "'");

    // prior
    const YAML::Node prior = require_map(root, "prior", "");
    reject_unknown_keys(prior, "prior", {"mean", "std", "particles"});
    s.prior.mean = opt_double(prior, "mean", "prior");
    s.prior.std = opt_double(prior, "std", "prior");
    if (s.prior.std) positive(prior, "std", "prior", *s.prior.std);
    if (s.prior.mean.has_value() != s.prior.std.has_value()) {
        scenario_fail(s.prior.mean ? "prior.std" : "prior.mean", prior, "mean and std must be given together");
    }
    if (const YAML::Node p = prior["particles"]) {
        if (p.IsSequence()) {
            std::vector<double> xs;
            for (std::size_t i = 0; i < p.size(); ++i) {
                xs.push_back(scalar_as<double>(p[i], "prior.particles[" + std::to_string(i) + "]", "a number"));
            }
            std::vector<double> sorted = xs;
            std::sort(sorted.begin(), sorted.end());
            if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
                scenario_fail("prior.particles", p, "particle locations must be distinct");
            }
            s.prior.particles = std::move(xs);
        } else {
            s.prior.particle_count = scalar_as<std::size_t>(p, "prior.particles", "a count or a list of locations");
        }
    }

    const bool particles = is_particle_method(s.method);
    if (particles) {
        const std::size_t L = s.prior.particles ? s.prior.particles->size() : s.prior.particle_count.value_or(0);
        if (!prior["particles"]) scenario_fail("prior.particles", prior, "missing required field");
        if (L < 2) scenario_fail("prior.particles", prior["particles"], "L >= 2 required");
        if (!s.prior.particles && !s.prior.mean) {
            scenario_fail("prior.mean", prior, "a particle count needs prior mean and std");
        }
    } else {
        if (!s.prior.mean) scenario_fail("prior.mean", prior, "missing required field");
        if (prior["particles"]) scenario_fail("prior.particles", prior["particles"], "only valid for particle methods");
    }
    if (s.method == Method::Morph && !s.prior.mean) {
        scenario_fail("prior.mean", prior, "morph needs the prior density (mean and std)");
    }

    // measurement
    if (s.method == Method::Morph) {
        if (root["measurement"]) scenario_fail("measurement", root["measurement"], "not used by method morph");
        const YAML::Node t = require_map(root, "morph_target", "");
        s.morph_target = parse_target(t, "morph_target");
    } else {
        if (root["morph_target"]) scenario_fail("morph_target", root["morph_target"], "only valid for method morph");
        s.measurement = parse_measurement(require_map(root, "measurement", ""), "measurement");
        const auto& m = *s.measurement;
        if (s.method == Method::GaussianAnalytic && !m.is_linear_additive()) {
            scenario_fail("measurement", root["measurement"], "gaussian-analytic requires an additive model with linear h");
        }
        if (s.method == Method::GaussianNumeric && m.kind != MeasurementSpec::Kind::Additive) {
            scenario_fail("measurement.model", root["measurement"], "gaussian-numeric requires an additive model");
        }
    }

    if (const YAML::Node sch = root["schedule"]) {
        if (!sch.IsMap()) scenario_fail("schedule", sch, "expected a mapping");
        reject_unknown_keys(sch, "schedule", {"kind", "exponent"});
        const std::string kind = opt_string(sch, "kind", "schedule").value_or("identity");
        if (kind == "identity") {
            if (sch["exponent"]) scenario_fail("schedule.exponent", sch["exponent"], "only valid for polynomial");
        } else if (kind == "polynomial") {
            const double p = positive(sch, "exponent", "schedule", req_double(sch, "exponent", "schedule"));
            s.schedule = ProgressionSchedule::polynomial(p);
        } else {
            scenario_fail("schedule.kind", sch["kind"], "unknown schedule '" + kind + "'");
        }
    }

    if (const YAML::Node sol = root["solver"]) {
        if (!sol.IsMap()) scenario_fail("solver", sol, "expected a mapping");
        s.solver = parse_solver(sol, "solver");
    }

    if (const YAML::Node q = root["quadrature"]) {
        if (!q.IsMap()) scenario_fail("quadrature", q, "expected a mapping");
        reject_unknown_keys(q, "quadrature", {"points", "rule"});
        if (auto n = opt_count(q, "points", "quadrature")) s.quadrature_points = *n;
        if (auto r = opt_string(q, "rule", "quadrature")) {
            if (*r == "gauss-hermite") s.quadrature_rule = QuadratureRule::GaussHermite;
            else if (*r == "quantile") s.quadrature_rule = QuadratureRule::MidpointQuantile;
            else scenario_fail("quadrature.rule", q["rule"], "unknown quadrature rule '" + *r + "'");
        }
        if (s.quadrature_points < 3) scenario_fail("quadrature.points", q, "N >= 3 required");
    }
    if (const YAML::Node c = root["collocation"]) {
        if (!c.IsMap()) scenario_fail("collocation", c, "expected a mapping");
        reject_unknown_keys(c, "collocation", {"points", "per_particle"});
        if (auto n = opt_count(c, "points", "collocation")) s.collocation_points = *n;
        if (auto n = opt_count(c, "per_particle", "collocation")) s.points_per_particle = *n;
        if (s.collocation_points < 3) scenario_fail("collocation.points", c, "C >= 3 required");
        if (s.points_per_particle < 1) scenario_fail("collocation.per_particle", c, "must be >= 1");
    }
    if (particles) {
        const std::size_t L = s.prior.particles ? s.prior.particles->size() : *s.prior.particle_count;
        if (L * s.points_per_particle < L + 1) {
            scenario_fail("collocation.per_particle", root["collocation"] ? root["collocation"] : root,
                          "L * per_particle must be >= L + 1");
        }
    }

    if (const YAML::Node o = root["oracle"]) {
        if (o.IsScalar()) {
            s.oracle = scalar_as<bool>(o, "oracle", "a boolean");
        } else if (o.IsMap()) {
            reject_unknown_keys(o, "oracle", {"enabled", "grid_points"});
            if (o["enabled"]) s.oracle = scalar_as<bool>(o["enabled"], "oracle.enabled", "a boolean");
            if (auto n = opt_count(o, "grid_points", "oracle")) s.grid_points = *n;
            if (s.grid_points < 1000) scenario_fail("oracle.grid_points", o, "N >= 1000 required");
        } else {
            scenario_fail("oracle", o, "expected a boolean or a mapping");
        }
    }
    // `seed` is accepted and ignored: every method is deterministic.
    if (const YAML::Node seed = root["seed"]) scalar_as<long long>(seed, "seed", "an integer");
    return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read scenario file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_scenario(buf.str());
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct GaussianSummary {
    double k;
    double mean;
    double std;
};

struct ParticleSummary {
    double k;
    std::size_t count;
    double mean;
    double std;
    double max_displacement;
};

struct OracleSummary {
    std::string source;  // "kalman", "grid" or "target"
    double mean;
    double std;
};

struct RunReport {
    Method method = Method::GaussianAnalytic;
    std::variant<GaussianSummary, ParticleSummary> posterior = GaussianSummary{};
    std::optional<OracleSummary> oracle;
    std::optional<GaussianMoments> abs_error;
    std::optional<GaussianMoments> rel_error;
    std::optional<double> ks_statistic;
    std::size_t solver_steps = 0;
    std::size_t rhs_evaluations = 0;
    double wall_time_s = 0.0;
};

struct RunOutcome {
    RunReport report;
    FlowTrace trace;
    std::vector<double> final_particles;
};

inline GaussianMoments empirical_moments(std::span<const double> xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(xs.size()))};
}

namespace detail {

inline std::optional<OracleSummary> measurement_oracle(const Scenario& s) {
    if (!s.oracle || !s.prior.mean) return std::nullopt;
    const double mp = *s.prior.mean;
    const double sp = *s.prior.std;
    const auto& m = *s.measurement;
    if (m.is_linear_additive()) {
        const auto k = kalman_update(mp, sp, m.h.gain, m.y, m.sigma_v);
        return OracleSummary{"kalman", k.mean, k.std};
    }
    const auto g = grid_posterior([mp, sp](double x) { return normal_pdf(x, mp, sp); }, m.build(), mp - 8.0 * sp,
                                  mp + 8.0 * sp, s.grid_points);
    return OracleSummary{"grid", g.moments.mean, g.moments.std};
}

inline void fill_errors(RunReport& r, double mean, double std) {
    if (!r.oracle) return;
    const GaussianMoments abs{std::abs(mean - r.oracle->mean), std::abs(std - r.oracle->std)};
    r.abs_error = abs;
    r.rel_error = GaussianMoments{abs.mean / std::max(std::abs(r.oracle->mean), 1e-300),
                                  abs.std / std::max(r.oracle->std, 1e-300)};
}

}  // namespace detail

/// Runs the scenario's flow and compares it with the applicable oracle.
inline RunOutcome run_scenario(const Scenario& s) {
    const auto t0 = std::chrono::steady_clock::now();
    RunOutcome out;
    RunReport& r = out.report;
    r.method = s.method;

    if (!is_particle_method(s.method)) {
        const MeasurementModel model = s.measurement->build();
        GaussianFlowMethod method = Collocation{s.collocation_points};
        if (s.method == Method::GaussianAnalytic) method = SquaredIntegralAnalytic{s.measurement->h.gain};
        if (s.method == Method::GaussianNumeric) method = SquaredIntegralNumeric{s.quadrature_points, s.quadrature_rule};
        const GaussianFlowSystem sys{GaussianParams::normalized(*s.prior.mean, *s.prior.std), model, method};
        auto res = gaussian_flow_update(sys, s.schedule, s.solver);
        r.posterior = GaussianSummary{res.posterior.k(), res.posterior.m(), res.posterior.sigma()};
        r.oracle = detail::measurement_oracle(s);
        detail::fill_errors(r, res.posterior.m(), res.posterior.sigma());
        out.trace = std::move(res.trace);
    } else {
        const ParticleEnsemble start =
            s.prior.particles ? ParticleEnsemble(*s.prior.particles)
                              : ParticleEnsemble::from_gaussian(*s.prior.mean, *s.prior.std, *s.prior.particle_count);
        std::optional<DodeRhs> rhs;
        if (s.method == Method::Morph) {
            const double mp = *s.prior.mean;
            const double sp = *s.prior.std;
            const MorphTarget target = *s.morph_target;
            rhs = DodeRhs::morph({[mp, sp](double x) { return normal_pdf(x, mp, sp); },
                                  [target](double x) { return target.pdf(x); }});
        } else {
            rhs = DodeRhs::measurement_update(s.measurement->build());
        }
        auto res = particle_flow_update(start, *rhs, s.schedule, s.points_per_particle, s.solver);
        const auto xs = res.ensemble.locations();
        double max_disp = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) max_disp = std::max(max_disp, std::abs(xs[i] - start[i]));
        const auto em = empirical_moments(xs);
        r.posterior = ParticleSummary{res.ensemble.k(), xs.size(), em.mean, em.std, max_disp};

        std::vector<double> sorted(xs.begin(), xs.end());
        std::sort(sorted.begin(), sorted.end());
        if (s.method == Method::Morph) {
            const MorphTarget& target = *s.morph_target;
            const auto tm = target.moments();
            if (s.oracle) r.oracle = OracleSummary{"target", tm.mean, tm.std};
            r.ks_statistic = ks_distance(sorted, [&](double x) { return target.cdf(x); });
        } else {
            r.oracle = detail::measurement_oracle(s);
        }
        detail::fill_errors(r, em.mean, em.std);
        out.final_particles.assign(xs.begin(), xs.end());
        out.trace = std::move(res.trace);
    }
    r.solver_steps = out.trace.steps;
    r.rhs_evaluations = out.trace.rhs_evaluations;
    r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// ---------------------------------------------------------------------------
// Output
// ---------------------------------------------------------------------------

/// Shortest-round-trip-free fixed format: 17 significant digits, "C" locale.
inline std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

/// Report as JSON with a fixed key order. Wall time is left out unless asked
/// for so that report.json is reproducible byte for byte.
inline nlohmann::ordered_json report_to_json(const RunReport& r, bool include_timing = false) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["version"] = kScenarioVersion;
    j["method"] = method_name(r.method);
    if (const auto* g = std::get_if<GaussianSummary>(&r.posterior)) {
        j["posterior"] = ordered_json{{"k", g->k}, {"mean", g->mean}, {"std", g->std}};
    } else {
        const auto& p = std::get<ParticleSummary>(r.posterior);
        j["posterior"] = ordered_json{{"k", p.k},
                                      {"count", p.count},
                                      {"mean", p.mean},
                                      {"std", p.std},
                                      {"max_displacement", p.max_displacement}};
    }
    j["oracle"] = r.oracle ? ordered_json{{"source", r.oracle->source}, {"mean", r.oracle->mean}, {"std", r.oracle->std}}
                           : ordered_json(nullptr);
    j["abs_error"] = r.abs_error ? ordered_json{{"mean", r.abs_error->mean}, {"std", r.abs_error->std}}
                                 : ordered_json(nullptr);
    j["rel_error"] = r.rel_error ? ordered_json{{"mean", r.rel_error->mean}, {"std", r.rel_error->std}}
                                 : ordered_json(nullptr);
    j["ks_statistic"] = r.ks_statistic ? ordered_json(*r.ks_statistic) : ordered_json(nullptr);
    j["solver_steps"] = r.solver_steps;
    j["rhs_evaluations"] = r.rhs_evaluations;
    if (include_timing) j["wall_time_s"] = r.wall_time_s;
    return j;
}

inline std::string trace_to_csv(const FlowTrace& trace) {
    std::string out = "gamma";
    const Eigen::Index n = trace.snapshots.empty() ? 0 : trace.front().eta.size();
    for (Eigen::Index i = 0; i < n; ++i) out += ",param_" + std::to_string(i);
    out += '\n';
    for (const auto& snap : trace.snapshots) {
        out += format_number(snap.gamma);
        for (Eigen::Index i = 0; i < snap.eta.size(); ++i) {
            out += ',';
            out += format_number(snap.eta[i]);
        }
        out += '\n';
    }
    return out;
}

namespace detail {
inline void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << content;
    if (!f) throw IoError("failed writing " + path.string());
}
}  // namespace detail

/// Writes report.json, trace.csv and, for particle methods, particles_final.csv.
inline std::vector<std::filesystem::path> write_outputs(const RunOutcome& outcome, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());

    std::vector<std::filesystem::path> written;
    const auto report = dir / "report.json";
    detail::write_file(report, report_to_json(outcome.report).dump(2) + "\n");
    written.push_back(report);

    const auto trace = dir / "trace.csv";
    detail::write_file(trace, trace_to_csv(outcome.trace));
    written.push_back(trace);

    if (is_particle_method(outcome.report.method)) {
        std::string body;
        for (double x : outcome.final_particles) body += format_number(x) + "\n";
        const auto parts = dir / "particles_final.csv";
        detail::write_file(parts, body);
        written.push_back(parts);
    }
    return written;
}

/// Process exit code for an error escaping a run.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const IoError*>(&e)) return 3;
    if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const DomainError*>(&e)) return 2;
    return 1;
}

}  // namespace flux
