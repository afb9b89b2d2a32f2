#pragma once

// The run configuration shared by every CLI stage: a JSON document with
// "model" plus simulation / score / train / eval blocks. Unknown keys are
// rejected, and every field is validated before a stage starts.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pflow/errors.hpp"
#include "pflow/eval.hpp"
#include "pflow/flowmap.hpp"
#include "pflow/label_gen.hpp"
#include "pflow/sde_models.hpp"
#include "pflow/simulate.hpp"

namespace pflow {

using nlohmann::json;

struct MuSpec {
    std::optional<std::size_t> n_mu;       // uniform grid on the model's box
    std::vector<Vector> explicit_values;  // used when n_mu is unset

    std::vector<Vector> resolve(const SdeModel& model) const
    {
        return n_mu ? uniform_mu_grid(model.mu_domain, *n_mu) : explicit_values;
    }
};

struct ConditionalSpec {
    Vector x;
    MuSpec mu;
};

struct HeatmapSpec {
    Vector x;
    MuSpec mu;
    double lower = -1.0;
    double upper = 1.0;
    std::size_t n_values = 101;
    std::size_t coordinate = 0;
};

struct TerminalSpec {
    GaussianStats initial;
    MuSpec mu;
    std::size_t n_steps = 10;
    std::size_t n_traj = 50000;
};

struct VarianceSpec {
    Vector x0;
    MuSpec mu;
    std::size_t n_steps = 50;
    std::size_t n_traj = 20000;
};

/// Upper bounds checked by `evaluate`; absent entries are not checked.
struct Thresholds {
    std::optional<double> max_abs_mean_error;
    std::optional<double> max_rel_mean_error;
    std::optional<double> max_rel_var_error;
    std::optional<double> max_terminal_mean_error;
    std::optional<double> max_terminal_std_error;
    std::optional<double> max_variance_rel_error;
    bool variance_argmin_nearest_one = false;
};

struct RunConfig {
    std::string model = "example1";

    struct Simulation {
        std::size_t n_mu = 21;
        std::size_t n_traj = 5000;
        double horizon = 1.0;
        double dt = 0.1;
        double fine_dt = 1e-3;
        std::string stepper = "euler_maruyama";  // or "exact"
        json init = {{"kind", "uniform"}, {"lower", {-5.0}}, {"upper", {5.0}}};
        std::uint64_t seed = 1;
    } simulation;

    struct Score {
        std::size_t n_neighbors = 2000;
        double nu_x = 1.0;
        double nu_mu = 0.5;
        double delta = kDefaultDelta;
        std::size_t n_tau = 1000;
        std::size_t n_samples = 50000;
        std::string sampling = "uniform";  // or "stratified_mu"
        std::uint64_t seed = 2;
    } score;

    struct Train {
        std::vector<std::size_t> hidden{128, 128, 128};
        double learning_rate = 1e-3;
        std::size_t batch_size = 1024;
        std::size_t patience = 50;
        double val_fraction = 0.1;
        std::size_t max_epochs = 2000;
        double c_scale = 3.0;
        std::uint64_t seed = 3;
    } train;

    struct Eval {
        std::size_t n_samples = 50000;
        std::uint64_t seed = 4;
        std::vector<ConditionalSpec> conditional;
        std::vector<HeatmapSpec> heatmaps;
        std::vector<TerminalSpec> terminal;
        std::vector<VarianceSpec> variance;
        Thresholds thresholds;
    } eval;

    json raw = json::object();  // the document as read, for manifests
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed)
{
    if (!obj.is_object()) throw ValidationError("config: '" + where + "' must be an object");
    const std::set<std::string> keys(allowed.begin(), allowed.end());
    for (const auto& [k, _] : obj.items())
        if (!keys.count(k)) throw ValidationError("config: unknown key '" + where + "." + k + "'");
}

template <class T>
void read_field(const json& obj, const std::string& where, const char* key, T& out)
{
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ValidationError("config: field '" + where + "." + key + "' has the wrong type");
    }
}

inline Vector vector_from_json(const json& j, const std::string& field)
{
    if (j.is_number()) return Vector::Constant(1, j.get<double>());
    if (!j.is_array() || j.empty()) throw ValidationError("config: field '" + field + "' must be a number or non-empty array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ValidationError("config: field '" + field + "' must contain numbers");
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    return v;
}

inline Matrix matrix_from_json(const json& j, const std::string& field)
{
    if (j.is_number()) return Matrix::Constant(1, 1, j.get<double>());
    if (!j.is_array() || j.empty()) throw ValidationError("config: field '" + field + "' must be a square array of rows");
    const auto n = static_cast<Eigen::Index>(j.size());
    Matrix m(n, n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const Vector row = vector_from_json(j[static_cast<std::size_t>(r)], field);
        if (row.size() != n) throw ValidationError("config: field '" + field + "' must be square");
        m.row(r) = row.transpose();
    }
    return m;
}

inline MuSpec mu_spec_from_json(const json& obj, const std::string& where)
{
    MuSpec spec;
    if (obj.contains("n_mu") == obj.contains("mu")) throw ValidationError("config: '" + where + "' needs exactly one of 'n_mu' or 'mu'");
    if (obj.contains("n_mu")) {
        std::size_t n = 0;
        read_field(obj, where, "n_mu", n);
        spec.n_mu = n;
    } else {
        const auto& list = obj.at("mu");
        if (!list.is_array() || list.empty()) throw ValidationError("config: '" + where + ".mu' must be a non-empty array");
        for (const auto& v : list) spec.explicit_values.push_back(vector_from_json(v, where + ".mu"));
    }
    return spec;
}

inline void check_mu_values(const std::vector<Vector>& grid, const SdeModel& model, const std::string& where)
{
    require(!grid.empty(), "config: '" + where + "' resolves to an empty mu grid");
    for (const auto& mu : grid) {
        require(static_cast<std::size_t>(mu.size()) == model.d_mu, "config: '" + where + "' has mu of wrong dimension");
        require(model.mu_domain.contains(mu), "config: '" + where + "' has mu outside the model's parameter box");
    }
}

inline void check_state(const Vector& x, const SdeModel& model, const std::string& where)
{
    require(static_cast<std::size_t>(x.size()) == model.d, "config: '" + where + "' must have length d=" + std::to_string(model.d));
}

}  // namespace detail

inline InitialLaw initial_law_from_json(const json& j)
{
    detail::reject_unknown(j, "simulation.init", {"kind", "lower", "upper", "mean", "cov", "point"});
    std::string kind;
    detail::read_field(j, "simulation.init", "kind", kind);
    if (kind == "uniform") {
        detail::require(j.contains("lower") && j.contains("upper"), "config: uniform init needs 'lower' and 'upper'");
        return InitialLaw::uniform(detail::vector_from_json(j.at("lower"), "simulation.init.lower"),
                                   detail::vector_from_json(j.at("upper"), "simulation.init.upper"));
    }
    if (kind == "stationary") return InitialLaw::stationary();
    if (kind == "gaussian") {
        detail::require(j.contains("mean") && j.contains("cov"), "config: gaussian init needs 'mean' and 'cov'");
        return InitialLaw::gaussian(detail::vector_from_json(j.at("mean"), "simulation.init.mean"),
                                    detail::matrix_from_json(j.at("cov"), "simulation.init.cov"));
    }
    if (kind == "point") {
        detail::require(j.contains("point"), "config: point init needs 'point'");
        return InitialLaw::point(detail::vector_from_json(j.at("point"), "simulation.init.point"));
    }
    throw ValidationError("config: 'simulation.init.kind' must be uniform, stationary, gaussian or point");
}

inline RunConfig parse_run_config(const json& doc)
{
    RunConfig cfg;
    cfg.raw = doc;
    detail::reject_unknown(doc, "<root>", {"model", "simulation", "score", "train", "eval"});
    detail::read_field(doc, "<root>", "model", cfg.model);

    if (doc.contains("simulation")) {
        const auto& s = doc.at("simulation");
        const std::string w = "simulation";
        detail::reject_unknown(s, w, {"n_mu", "n_traj", "horizon", "dt", "fine_dt", "stepper", "init", "seed"});
        detail::read_field(s, w, "n_mu", cfg.simulation.n_mu);
        detail::read_field(s, w, "n_traj", cfg.simulation.n_traj);
        detail::read_field(s, w, "horizon", cfg.simulation.horizon);
        detail::read_field(s, w, "dt", cfg.simulation.dt);
        detail::read_field(s, w, "fine_dt", cfg.simulation.fine_dt);
        detail::read_field(s, w, "stepper", cfg.simulation.stepper);
        detail::read_field(s, w, "seed", cfg.simulation.seed);
        if (s.contains("init")) cfg.simulation.init = s.at("init");
    }
    if (doc.contains("score")) {
        const auto& s = doc.at("score");
        const std::string w = "score";
        detail::reject_unknown(s, w, {"n_neighbors", "nu_x", "nu_mu", "delta", "n_tau", "n_samples", "sampling", "seed"});
        detail::read_field(s, w, "n_neighbors", cfg.score.n_neighbors);
        detail::read_field(s, w, "nu_x", cfg.score.nu_x);
        detail::read_field(s, w, "nu_mu", cfg.score.nu_mu);
        detail::read_field(s, w, "delta", cfg.score.delta);
        detail::read_field(s, w, "n_tau", cfg.score.n_tau);
        detail::read_field(s, w, "n_samples", cfg.score.n_samples);
        detail::read_field(s, w, "sampling", cfg.score.sampling);
        detail::read_field(s, w, "seed", cfg.score.seed);
    }
    if (doc.contains("train")) {
        const auto& s = doc.at("train");
        const std::string w = "train";
        detail::reject_unknown(s, w, {"hidden", "learning_rate", "batch_size", "patience", "val_fraction", "max_epochs", "c_scale", "seed"});
        detail::read_field(s, w, "hidden", cfg.train.hidden);
        detail::read_field(s, w, "learning_rate", cfg.train.learning_rate);
        detail::read_field(s, w, "batch_size", cfg.train.batch_size);
        detail::read_field(s, w, "patience", cfg.train.patience);
        detail::read_field(s, w, "val_fraction", cfg.train.val_fraction);
        detail::read_field(s, w, "max_epochs", cfg.train.max_epochs);
        detail::read_field(s, w, "c_scale", cfg.train.c_scale);
        detail::read_field(s, w, "seed", cfg.train.seed);
    }
    if (doc.contains("eval")) {
        const auto& e = doc.at("eval");
        detail::reject_unknown(e, "eval", {"n_samples", "seed", "conditional", "heatmaps", "terminal", "variance", "thresholds"});
        detail::read_field(e, "eval", "n_samples", cfg.eval.n_samples);
        detail::read_field(e, "eval", "seed", cfg.eval.seed);
        auto list = [&](const char* key) {
            if (!e.contains(key)) return json::array();
            if (!e.at(key).is_array()) throw ValidationError(std::string("config: 'eval.") + key + "' must be an array");
            return e.at(key);
        };
        for (const auto& c : list("conditional")) {
            const std::string w = "eval.conditional";
            detail::reject_unknown(c, w, {"x", "n_mu", "mu"});
            detail::require(c.contains("x"), "config: '" + w + "' entries need 'x'");
            cfg.eval.conditional.push_back({detail::vector_from_json(c.at("x"), w + ".x"), detail::mu_spec_from_json(c, w)});
        }
        for (const auto& c : list("heatmaps")) {
            const std::string w = "eval.heatmaps";
            detail::reject_unknown(c, w, {"x", "n_mu", "mu", "lower", "upper", "n_values", "coordinate"});
            detail::require(c.contains("x"), "config: '" + w + "' entries need 'x'");
            HeatmapSpec h;
            h.x = detail::vector_from_json(c.at("x"), w + ".x");
            h.mu = detail::mu_spec_from_json(c, w);
            detail::read_field(c, w, "lower", h.lower);
            detail::read_field(c, w, "upper", h.upper);
            detail::read_field(c, w, "n_values", h.n_values);
            detail::read_field(c, w, "coordinate", h.coordinate);
            cfg.eval.heatmaps.push_back(std::move(h));
        }
        for (const auto& c : list("terminal")) {
            const std::string w = "eval.terminal";
            detail::reject_unknown(c, w, {"mean", "cov", "n_mu", "mu", "n_steps", "n_traj"});
            detail::require(c.contains("mean") && c.contains("cov"), "config: '" + w + "' entries need 'mean' and 'cov'");
            TerminalSpec t;
            t.initial = {detail::vector_from_json(c.at("mean"), w + ".mean"), detail::matrix_from_json(c.at("cov"), w + ".cov")};
            t.mu = detail::mu_spec_from_json(c, w);
            detail::read_field(c, w, "n_steps", t.n_steps);
            detail::read_field(c, w, "n_traj", t.n_traj);
            cfg.eval.terminal.push_back(std::move(t));
        }
        for (const auto& c : list("variance")) {
            const std::string w = "eval.variance";
            detail::reject_unknown(c, w, {"x0", "n_mu", "mu", "n_steps", "n_traj"});
            detail::require(c.contains("x0"), "config: '" + w + "' entries need 'x0'");
            VarianceSpec v;
            v.x0 = detail::vector_from_json(c.at("x0"), w + ".x0");
            v.mu = detail::mu_spec_from_json(c, w);
            detail::read_field(c, w, "n_steps", v.n_steps);
            detail::read_field(c, w, "n_traj", v.n_traj);
            cfg.eval.variance.push_back(std::move(v));
        }
        if (e.contains("thresholds")) {
            const auto& t = e.at("thresholds");
            const std::string w = "eval.thresholds";
            detail::reject_unknown(t, w, {"max_abs_mean_error", "max_rel_mean_error", "max_rel_var_error", "max_terminal_mean_error",
                                          "max_terminal_std_error", "max_variance_rel_error", "variance_argmin_nearest_one"});
            auto opt = [&](const char* key, std::optional<double>& out) {
                if (!t.contains(key)) return;
                double v = 0.0;
                detail::read_field(t, w, key, v);
                out = v;
            };
            auto& th = cfg.eval.thresholds;
            opt("max_abs_mean_error", th.max_abs_mean_error);
            opt("max_rel_mean_error", th.max_rel_mean_error);
            opt("max_rel_var_error", th.max_rel_var_error);
            opt("max_terminal_mean_error", th.max_terminal_mean_error);
            opt("max_terminal_std_error", th.max_terminal_std_error);
            opt("max_variance_rel_error", th.max_variance_rel_error);
            detail::read_field(t, w, "variance_argmin_nearest_one", th.variance_argmin_nearest_one);
        }
    }
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("config: cannot open '" + path.string() + "'");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ValidationError("config: '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return parse_run_config(doc);
}

// ---------------------------------------------------------------------------
// Stage configurations
// ---------------------------------------------------------------------------

inline SdeModel resolve_model(const RunConfig& cfg) { return default_registry().make(cfg.model); }

inline SimulationConfig simulation_config(const RunConfig& cfg, const SdeModel& model, unsigned workers = 0)
{
    const auto& s = cfg.simulation;
    SimulationConfig out;
    out.n_mu = s.n_mu;
    out.n_traj = s.n_traj;
    out.horizon = s.horizon;
    out.dt = s.dt;
    out.fine_dt = s.fine_dt;
    if (s.stepper == "euler_maruyama") {
        out.stepper = Stepper::EulerMaruyama;
    } else if (s.stepper == "exact") {
        out.stepper = Stepper::ExactGaussian;
    } else {
        throw ValidationError("config: 'simulation.stepper' must be euler_maruyama or exact");
    }
    out.init = initial_law_from_json(s.init);
    out.init.validate(model);
    out.seed = RngSeed{s.seed};
    out.workers = workers;
    detail::require(s.n_mu >= 1, "config: 'simulation.n_mu' must be at least 1");
    detail::require(s.n_traj >= 1, "config: 'simulation.n_traj' must be at least 1");
    detail::require(s.dt > 0.0 && s.fine_dt > 0.0 && s.horizon > 0.0, "config: 'simulation' times must be positive");
    (void)detail::integral_ratio(s.horizon, s.dt, "config: 'simulation.horizon' / 'simulation.dt'");
    if (out.stepper == Stepper::EulerMaruyama) (void)detail::integral_ratio(s.dt, s.fine_dt, "config: 'simulation.dt' / 'simulation.fine_dt'");
    return out;
}

inline OdeConfig ode_config(const RunConfig& cfg, unsigned workers = 0)
{
    const auto& s = cfg.score;
    detail::require(s.n_tau >= 2, "config: 'score.n_tau' must be at least 2");
    detail::require(s.delta >= 0.0, "config: 'score.delta' must be nonnegative");
    OdeConfig out = OdeConfig::make(s.n_tau, ScoreConfig{s.n_neighbors, s.nu_x, s.nu_mu}, s.n_samples, s.delta);
    if (s.sampling == "uniform") {
        out.sampling = QuerySampling::Uniform;
    } else if (s.sampling == "stratified_mu") {
        out.sampling = QuerySampling::StratifiedMu;
    } else {
        throw ValidationError("config: 'score.sampling' must be uniform or stratified_mu");
    }
    out.workers = workers;
    try {
        out.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("config: score block: ") + e.what());
    }
    return out;
}

inline TrainConfig train_config(const RunConfig& cfg)
{
    const auto& t = cfg.train;
    TrainConfig out;
    out.learning_rate = t.learning_rate;
    out.batch_size = t.batch_size;
    out.patience = t.patience;
    out.val_fraction = t.val_fraction;
    out.max_epochs = t.max_epochs;
    out.seed = RngSeed{t.seed};
    try {
        out.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(std::string("config: train block: ") + e.what());
    }
    detail::require(!t.hidden.empty(), "config: 'train.hidden' must list at least one width");
    for (const auto h : t.hidden) detail::require(h > 0, "config: 'train.hidden' widths must be positive");
    detail::require(t.c_scale > 0.0, "config: 'train.c_scale' must be positive");
    return out;
}

inline void validate_eval(const RunConfig& cfg, const SdeModel& model)
{
    const auto& e = cfg.eval;
    detail::require(e.n_samples >= 2, "config: 'eval.n_samples' must be at least 2");
    for (const auto& c : e.conditional) {
        detail::check_state(c.x, model, "eval.conditional.x");
        detail::check_mu_values(c.mu.resolve(model), model, "eval.conditional");
    }
    for (const auto& h : e.heatmaps) {
        detail::check_state(h.x, model, "eval.heatmaps.x");
        detail::check_mu_values(h.mu.resolve(model), model, "eval.heatmaps");
        detail::require(h.upper > h.lower && h.n_values >= 2, "config: 'eval.heatmaps' needs upper > lower and n_values >= 2");
        detail::require(h.coordinate < model.d, "config: 'eval.heatmaps.coordinate' out of range");
    }
    for (const auto& t : e.terminal) {
        detail::check_state(t.initial.mean, model, "eval.terminal.mean");
        detail::require(t.initial.cov.rows() == t.initial.mean.size(), "config: 'eval.terminal.cov' has the wrong size");
        detail::require(t.initial.is_valid(), "config: 'eval.terminal.cov' must be symmetric positive semidefinite");
        detail::check_mu_values(t.mu.resolve(model), model, "eval.terminal");
        detail::require(t.n_steps >= 1 && t.n_traj >= 2, "config: 'eval.terminal' needs n_steps >= 1 and n_traj >= 2");
    }
    for (const auto& v : e.variance) {
        detail::check_state(v.x0, model, "eval.variance.x0");
        detail::check_mu_values(v.mu.resolve(model), model, "eval.variance");
        detail::require(v.n_steps >= 1 && v.n_traj >= 2, "config: 'eval.variance' needs n_steps >= 1 and n_traj >= 2");
    }
}

/// Validates every block; throws ValidationError naming the offending field.
inline void validate_run_config(const RunConfig& cfg)
{
    const SdeModel model = resolve_model(cfg);
    (void)simulation_config(cfg, model);
    (void)ode_config(cfg);
    (void)train_config(cfg);
    validate_eval(cfg, model);
}

// ---------------------------------------------------------------------------
// Evaluation driver
// ---------------------------------------------------------------------------

inline EvalReports run_evaluation(const RunConfig& cfg, const FlowMapNet& net, const SdeModel& model, unsigned workers = 0)
{
    validate_eval(cfg, model);
    const RngSeed seed{cfg.eval.seed};
    EvalReports out;
    for (const auto& c : cfg.eval.conditional)
        out.conditional.push_back(conditional_moment_sweep(net, model, c.x, c.mu.resolve(model), cfg.eval.n_samples, seed, workers));
    for (const auto& h : cfg.eval.heatmaps)
        out.heatmaps.push_back(heatmap_grid(net, model, h.x, h.mu.resolve(model), linspace(h.lower, h.upper, h.n_values), cfg.eval.n_samples, seed,
                                            h.coordinate, workers));
    for (const auto& t : cfg.eval.terminal)
        for (const auto& mu : t.mu.resolve(model)) out.terminal.push_back(terminal_distribution(net, model, t.initial, mu, t.n_steps, t.n_traj, seed));
    for (const auto& v : cfg.eval.variance)
        for (const auto& mu : v.mu.resolve(model)) out.variance.push_back(variance_evolution(net, model, v.x0, mu, v.n_steps, v.n_traj, seed));
    return out;
}

/// Index of the smallest final learned variance (first coordinate) among
/// `runs`.
inline std::size_t final_variance_argmin(const std::vector<VarianceEvolution>& runs)
{
    detail::require(!runs.empty(), "variance argmin: no runs");
    std::size_t best = 0;
    for (std::size_t i = 1; i < runs.size(); ++i)
        if (runs[i].steps.back().learned_var[0] < runs[best].steps.back().learned_var[0]) best = i;
    return best;
}

/// Index of the mu value nearest `target` (first coordinate); ties go to the
/// earlier entry.
inline std::size_t nearest_mu(const std::vector<VarianceEvolution>& runs, double target)
{
    detail::require(!runs.empty(), "nearest mu: no runs");
    std::size_t best = 0;
    for (std::size_t i = 1; i < runs.size(); ++i)
        if (std::abs(runs[i].mu[0] - target) < std::abs(runs[best].mu[0] - target)) best = i;
    return best;
}

/// Messages for every configured threshold that the reports exceed.
inline std::vector<std::string> threshold_violations(const EvalReports& r, const Thresholds& th)
{
    std::vector<std::string> out;
    const auto summary = report_summary(r);
    auto check = [&](const std::optional<double>& limit, const char* key) {
        if (!limit) return;
        const double v = summary.at(key).get<double>();
        if (!(v <= *limit)) {
            std::ostringstream msg;
            msg << key << " = " << v << " exceeds " << *limit;
            out.push_back(msg.str());
        }
    };
    check(th.max_abs_mean_error, "max_abs_mean_error");
    check(th.max_rel_mean_error, "max_rel_mean_error");
    check(th.max_rel_var_error, "max_rel_var_error");
    check(th.max_terminal_mean_error, "max_terminal_mean_error");
    check(th.max_terminal_std_error, "max_terminal_std_error");
    if (th.max_variance_rel_error) {
        for (const auto& v : r.variance) {
            const double e = v.final_rel_error();
            if (!(e <= *th.max_variance_rel_error))
                out.push_back("variance rel error " + format_double(e) + " at mu=" + format_double(v.mu[0]) + " exceeds " +
                              format_double(*th.max_variance_rel_error));
        }
    }
    if (th.variance_argmin_nearest_one && !r.variance.empty()) {
        const auto got = final_variance_argmin(r.variance);
        const auto want = nearest_mu(r.variance, 1.0);
        if (got != want)
            out.push_back("variance minimum at mu=" + format_double(r.variance[got].mu[0]) + ", expected mu=" + format_double(r.variance[want].mu[0]));
    }
    return out;
}

}  // namespace pflow
