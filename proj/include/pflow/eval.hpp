#pragma once

// Comparison of a trained flow map against the analytic laws of the
// benchmarks: conditional moments, density heatmaps, terminal laws of
// rollouts and variance evolution, plus CSV/JSON report writers.
//
// Every exact column is produced by the sde_models oracles alone; the network
// only enters the learned columns.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pflow/errors.hpp"
#include "pflow/flowmap.hpp"
#include "pflow/parallel.hpp"
#include "pflow/rng.hpp"
#include "pflow/sde_models.hpp"
#include "pflow/simulate.hpp"

namespace pflow {

// ---------------------------------------------------------------------------
// Kernel density estimation
// ---------------------------------------------------------------------------

struct DensityCurve {
    std::vector<double> grid;
    std::vector<double> density;
    double bandwidth = 0.0;

    /// Trapezoid integral over the grid.
    double mass() const
    {
        double total = 0.0;
        for (std::size_t i = 1; i < grid.size(); ++i) total += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
        return total;
    }
};

inline double sample_mean(std::span<const double> v)
{
    double s = 0.0;
    for (const double x : v) s += x;
    return s / static_cast<double>(v.size());
}

/// Unbiased sample variance (n - 1 denominator).
inline double sample_variance(std::span<const double> v)
{
    detail::require(v.size() >= 2, "sample_variance: need at least 2 samples");
    const double m = sample_mean(v);
    double s = 0.0;
    for (const double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

/// 1.06 * sd * n^(-1/5).
inline double silverman_bandwidth(std::span<const double> samples)
{
    const double sd = std::sqrt(sample_variance(samples));
    if (!(sd > 0.0)) throw ValidationError("kde_1d: samples have zero variance; pass an explicit bandwidth");
    return 1.06 * sd * std::pow(static_cast<double>(samples.size()), -0.2);
}

inline double normal_pdf(double x, double mean, double var)
{
    const double u = x - mean;
    return std::exp(-0.5 * u * u / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

/// Gaussian-kernel density estimate on `grid`. Contributions beyond 9
/// bandwidths (relative size below 1e-17) are skipped.
inline DensityCurve kde_1d(std::span<const double> samples, std::span<const double> grid, std::optional<double> bandwidth = std::nullopt)
{
    detail::require(samples.size() >= 2, "kde_1d: need at least 2 samples");
    detail::require(!grid.empty(), "kde_1d: grid is empty");
    detail::require(std::is_sorted(grid.begin(), grid.end()), "kde_1d: grid must be sorted");
    const double h = bandwidth ? *bandwidth : silverman_bandwidth(samples);
    detail::require(h > 0.0 && std::isfinite(h), "kde_1d: bandwidth must be positive");

    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    const double norm = 1.0 / (static_cast<double>(sorted.size()) * h * std::sqrt(2.0 * std::numbers::pi));
    const double reach = 9.0 * h;

    DensityCurve out{{grid.begin(), grid.end()}, std::vector<double>(grid.size(), 0.0), h};
    for (std::size_t g = 0; g < grid.size(); ++g) {
        auto lo = std::lower_bound(sorted.begin(), sorted.end(), grid[g] - reach);
        auto hi = std::upper_bound(lo, sorted.end(), grid[g] + reach);
        double s = 0.0;
        for (auto it = lo; it != hi; ++it) {
            const double u = (grid[g] - *it) / h;
            s += std::exp(-0.5 * u * u);
        }
        out.density[g] = s * norm;
    }
    return out;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n)
{
    detail::require(n >= 2 && hi > lo, "linspace: need n >= 2 and hi > lo");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

namespace detail {

inline std::vector<double> row_of(const Matrix& samples, Eigen::Index r)
{
    std::vector<double> v(static_cast<std::size_t>(samples.cols()));
    for (Eigen::Index c = 0; c < samples.cols(); ++c) v[static_cast<std::size_t>(c)] = samples(r, c);
    return v;
}

inline Matrix sample_covariance(const Matrix& samples)
{
    const Vector mean = samples.rowwise().mean();
    const Matrix centered = samples.colwise() - mean;
    return centered * centered.transpose() / static_cast<double>(samples.cols() - 1);
}

inline void check_compatible(const FlowMapNet& net, const SdeModel& model)
{
    require(net.d == model.d && net.d_mu == model.d_mu,
            "eval: network dimensions (d=" + std::to_string(net.d) + ", d_mu=" + std::to_string(net.d_mu) + ") do not match model " + model.name);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Conditional moments
// ---------------------------------------------------------------------------

struct MomentRow {
    Vector mu;
    Vector learned_mean;
    Vector exact_mean;
    Vector learned_var;  // per-coordinate
    Vector exact_var;
    double mean_abs_error = 0.0;  // Euclidean norm of the mean difference
    double mean_rel_error = 0.0;  // mean_abs_error / |exact mean| (absolute if the exact mean is 0)
    double var_rel_error = 0.0;   // max over coordinates
    double cov_abs_error = 0.0;   // max entry of |learned cov - exact cov|
};

struct MomentReport {
    Vector x_query;
    std::size_t n_samples = 0;
    std::vector<MomentRow> rows;

    double max_mean_abs_error() const { return max_of(&MomentRow::mean_abs_error); }
    double max_mean_rel_error() const { return max_of(&MomentRow::mean_rel_error); }
    double max_var_rel_error() const { return max_of(&MomentRow::var_rel_error); }

private:
    double max_of(double MomentRow::*field) const
    {
        double m = 0.0;
        for (const auto& r : rows) m = std::max(m, r.*field);
        return m;
    }
};

/// Exact one-step moments from the oracle for each mu; no network involved.
inline std::vector<GaussianStats> exact_conditional_column(const SdeModel& model, const Vector& x_query, const std::vector<Vector>& mu_grid, double dt)
{
    std::vector<GaussianStats> out;
    out.reserve(mu_grid.size());
    for (const auto& mu : mu_grid) out.push_back(exact_conditional(model, x_query, mu, dt));
    return out;
}

/// One-step draws at x_query for each mu. Every mu uses the same latent
/// stream, so differences across mu are not masked by sampling noise.
inline MomentReport conditional_moment_sweep(const FlowMapNet& net, const SdeModel& model, const Vector& x_query, const std::vector<Vector>& mu_grid,
                                             std::size_t n_samples, RngSeed seed, unsigned workers = 0)
{
    detail::require(n_samples >= 2, "conditional_moment_sweep: n_samples must be at least 2");
    detail::require(!mu_grid.empty(), "conditional_moment_sweep: mu grid is empty");
    detail::check_compatible(net, model);
    const auto exact = exact_conditional_column(model, x_query, mu_grid, net.dt);

    MomentReport report{x_query, n_samples, std::vector<MomentRow>(mu_grid.size())};
    parallel_for(mu_grid.size(), workers, [&](std::size_t k) {
        const Matrix draws = sample_many(net, x_query, mu_grid[k], n_samples, seed);
        const Matrix cov = detail::sample_covariance(draws);
        MomentRow& row = report.rows[k];
        row.mu = mu_grid[k];
        row.learned_mean = draws.rowwise().mean();
        row.exact_mean = exact[k].mean;
        row.learned_var = cov.diagonal();
        row.exact_var = exact[k].cov.diagonal();
        row.mean_abs_error = (row.learned_mean - row.exact_mean).norm();
        const double scale = row.exact_mean.norm();
        row.mean_rel_error = scale > 0.0 ? row.mean_abs_error / scale : row.mean_abs_error;
        row.var_rel_error = ((row.learned_var - row.exact_var).cwiseAbs().array() / row.exact_var.array()).maxCoeff();
        row.cov_abs_error = (cov - exact[k].cov).cwiseAbs().maxCoeff();
    });
    return report;
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

struct HeatmapReport {
    Vector x_query;
    std::size_t coordinate = 0;  // marginal shown for d > 1
    std::vector<Vector> mu_grid;
    std::vector<double> value_grid;
    Matrix learned;  // |value_grid| x |mu_grid|
    Matrix exact;
    std::vector<double> bandwidths;  // per mu column
};

/// Exact marginal density of coordinate `coordinate` of X_{n+1} given x_query,
/// one column per mu.
inline Matrix exact_density_matrix(const SdeModel& model, const Vector& x_query, const std::vector<Vector>& mu_grid, const std::vector<double>& value_grid,
                                   double dt, std::size_t coordinate = 0)
{
    detail::require(coordinate < model.d, "heatmap: coordinate out of range");
    const auto c = static_cast<Eigen::Index>(coordinate);
    Matrix out(static_cast<Eigen::Index>(value_grid.size()), static_cast<Eigen::Index>(mu_grid.size()));
    for (std::size_t k = 0; k < mu_grid.size(); ++k) {
        const auto law = exact_conditional(model, x_query, mu_grid[k], dt);
        for (std::size_t v = 0; v < value_grid.size(); ++v)
            out(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)) = normal_pdf(value_grid[v], law.mean[c], law.cov(c, c));
    }
    return out;
}

inline HeatmapReport heatmap_grid(const FlowMapNet& net, const SdeModel& model, const Vector& x_query, const std::vector<Vector>& mu_grid,
                                  const std::vector<double>& value_grid, std::size_t n_samples, RngSeed seed, std::size_t coordinate = 0,
                                  unsigned workers = 0)
{
    detail::require(!mu_grid.empty() && !value_grid.empty(), "heatmap_grid: grids must be non-empty");
    detail::require(n_samples >= 2, "heatmap_grid: n_samples must be at least 2");
    detail::check_compatible(net, model);
    HeatmapReport report;
    report.x_query = x_query;
    report.coordinate = coordinate;
    report.mu_grid = mu_grid;
    report.value_grid = value_grid;
    report.exact = exact_density_matrix(model, x_query, mu_grid, value_grid, net.dt, coordinate);
    report.learned.resize(report.exact.rows(), report.exact.cols());
    report.bandwidths.assign(mu_grid.size(), 0.0);
    parallel_for(mu_grid.size(), workers, [&](std::size_t k) {
        const Matrix draws = sample_many(net, x_query, mu_grid[k], n_samples, seed);
        const auto marginal = detail::row_of(draws, static_cast<Eigen::Index>(coordinate));
        const auto curve = kde_1d(marginal, value_grid);
        for (std::size_t v = 0; v < value_grid.size(); ++v)
            report.learned(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)) = curve.density[v];
        report.bandwidths[k] = curve.bandwidth;
    });
    return report;
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

struct TerminalReport {
    Vector mu;
    std::size_t n_steps = 0;
    std::size_t n_traj = 0;
    Vector learned_mean;
    Vector exact_mean;
    Vector learned_std;  // per coordinate
    Vector exact_std;
    double mean_abs_error = 0.0;  // max over coordinates
    double std_abs_error = 0.0;
};

/// n_traj trajectories from `initial` pushed through n_steps learned steps,
/// compared with the exact law at t = n_steps * dt. The initial ensemble is
/// drawn from the EvalInitial stream and shared across calls with equal seed.
inline TerminalReport terminal_distribution(const FlowMapNet& net, const SdeModel& model, const GaussianStats& initial, const Vector& mu,
                                            std::size_t n_steps, std::size_t n_traj, RngSeed seed)
{
    detail::check_compatible(net, model);
    detail::require(n_traj >= 2, "terminal_distribution: n_traj must be at least 2");
    detail::require(initial.mean.size() == static_cast<Eigen::Index>(model.d), "terminal_distribution: initial law has wrong dimension");
    auto init_rng = substream(seed, StreamTag::EvalInitial, {0});
    Matrix x0(initial.mean.size(), static_cast<Eigen::Index>(n_traj));
    for (Eigen::Index c = 0; c < x0.cols(); ++c) x0.col(c) = sample_gaussian(initial, init_rng);

    const Matrix xt = rollout(net, x0, mu, n_steps, seed);
    const auto exact = exact_terminal(model, initial.mean, initial.cov, mu, static_cast<double>(n_steps) * net.dt);
    TerminalReport r;
    r.mu = mu;
    r.n_steps = n_steps;
    r.n_traj = n_traj;
    r.learned_mean = xt.rowwise().mean();
    r.exact_mean = exact.mean;
    r.learned_std = detail::sample_covariance(xt).diagonal().cwiseSqrt();
    r.exact_std = exact.cov.diagonal().cwiseSqrt();
    r.mean_abs_error = (r.learned_mean - r.exact_mean).cwiseAbs().maxCoeff();
    r.std_abs_error = (r.learned_std - r.exact_std).cwiseAbs().maxCoeff();
    return r;
}

struct VarianceStep {
    std::size_t step = 0;
    double time = 0.0;
    Vector learned_var;
    Vector exact_var;
};

struct VarianceEvolution {
    Vector x0;
    Vector mu;
    std::size_t n_traj = 0;
    std::vector<VarianceStep> steps;  // k = 0 .. n_steps

    /// Largest relative variance error over coordinates at step k (k >= 1).
    double rel_error_at(std::size_t k) const
    {
        const auto& s = steps.at(k);
        detail::require((s.exact_var.array() > 0.0).all(), "variance evolution: exact variance is zero at this step");
        return ((s.learned_var - s.exact_var).cwiseAbs().array() / s.exact_var.array()).maxCoeff();
    }

    double final_rel_error() const { return rel_error_at(steps.size() - 1); }
};

/// Rollout from the deterministic state x0; per-step ensemble variance next to
/// the oracle variance at t = k dt.
inline VarianceEvolution variance_evolution(const FlowMapNet& net, const SdeModel& model, const Vector& x0, const Vector& mu, std::size_t n_steps,
                                            std::size_t n_traj, RngSeed seed)
{
    detail::check_compatible(net, model);
    detail::require(n_traj >= 2, "variance_evolution: n_traj must be at least 2");
    VarianceEvolution out{x0, mu, n_traj, {}};
    const Matrix zero_cov = Matrix::Zero(x0.size(), x0.size());
    const Matrix start = x0.replicate(1, static_cast<Eigen::Index>(n_traj));
    rollout(net, start, mu, n_steps, seed, [&](std::size_t k, const Matrix& states) {
        const double t = static_cast<double>(k) * net.dt;
        const auto exact = exact_terminal(model, x0, zero_cov, mu, t);
        out.steps.push_back({k, t, detail::sample_covariance(states).diagonal(), exact.cov.diagonal()});
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReports {
    std::vector<MomentReport> conditional;
    std::vector<HeatmapReport> heatmaps;
    std::vector<TerminalReport> terminal;
    std::vector<VarianceEvolution> variance;
};

namespace detail {

inline std::string join_vector(const Vector& v)
{
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (i) s += ';';
        s += format_double(v[i]);
    }
    return s;
}

inline std::ofstream open_report(const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    return out;
}

inline void close_report(std::ofstream& out, const std::filesystem::path& path)
{
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

/// Summary statistics mirroring the quantitative comparisons in the reports.
inline nlohmann::json report_summary(const EvalReports& r)
{
    using nlohmann::json;
    json s = json::object();
    json cond = json::array();
    double max_abs = 0.0, max_rel_mean = 0.0, max_rel_var = 0.0;
    for (const auto& m : r.conditional) {
        cond.push_back({{"x_query", std::vector<double>(m.x_query.data(), m.x_query.data() + m.x_query.size())},
                        {"max_abs_mean_error", m.max_mean_abs_error()},
                        {"max_rel_mean_error", m.max_mean_rel_error()},
                        {"max_rel_var_error", m.max_var_rel_error()}});
        max_abs = std::max(max_abs, m.max_mean_abs_error());
        max_rel_mean = std::max(max_rel_mean, m.max_mean_rel_error());
        max_rel_var = std::max(max_rel_var, m.max_var_rel_error());
    }
    s["conditional"] = cond;
    s["max_abs_mean_error"] = max_abs;
    s["max_rel_mean_error"] = max_rel_mean;
    s["max_rel_var_error"] = max_rel_var;

    json term = json::array();
    double max_term_mean = 0.0, max_term_std = 0.0;
    for (const auto& t : r.terminal) {
        term.push_back({{"mu", std::vector<double>(t.mu.data(), t.mu.data() + t.mu.size())},
                        {"n_steps", t.n_steps},
                        {"mean_abs_error", t.mean_abs_error},
                        {"std_abs_error", t.std_abs_error}});
        max_term_mean = std::max(max_term_mean, t.mean_abs_error);
        max_term_std = std::max(max_term_std, t.std_abs_error);
    }
    s["terminal"] = term;
    s["max_terminal_mean_error"] = max_term_mean;
    s["max_terminal_std_error"] = max_term_std;

    json var = json::array();
    for (const auto& v : r.variance) {
        if (v.steps.size() < 2) continue;
        var.push_back({{"mu", std::vector<double>(v.mu.data(), v.mu.data() + v.mu.size())},
                       {"n_steps", v.steps.size() - 1},
                       {"final_learned_var", std::vector<double>(v.steps.back().learned_var.data(), v.steps.back().learned_var.data() + v.steps.back().learned_var.size())},
                       {"final_exact_var", std::vector<double>(v.steps.back().exact_var.data(), v.steps.back().exact_var.data() + v.steps.back().exact_var.size())},
                       {"final_rel_error", v.final_rel_error()}});
    }
    s["variance"] = var;

    json heat = json::array();
    for (const auto& h : r.heatmaps) heat.push_back({{"max_abs_density_error", (h.learned - h.exact).cwiseAbs().maxCoeff()}});
    s["heatmaps"] = heat;
    return s;
}

/// Writes conditional.csv, heatmap.csv, terminal.csv, variance.csv, the long
/// format plot_data.csv (series, x, y) and summary.json into `dir`.
inline void emit_report(const EvalReports& r, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    std::string plot = "series,x,y\n";
    const auto add_plot = [&](const std::string& series, double x, double y) {
        plot += series + ',' + format_double(x) + ',' + format_double(y) + '\n';
    };

    {
        const auto path = dir / "conditional.csv";
        auto out = detail::open_report(path);
        out << "x_query,mu,learned_mean,exact_mean,mean_abs_error,mean_rel_error,learned_var,exact_var,var_rel_error,cov_abs_error\n";
        for (std::size_t q = 0; q < r.conditional.size(); ++q) {
            const auto& m = r.conditional[q];
            for (const auto& row : m.rows) {
                out << detail::join_vector(m.x_query) << ',' << detail::join_vector(row.mu) << ',' << detail::join_vector(row.learned_mean) << ','
                    << detail::join_vector(row.exact_mean) << ',' << format_double(row.mean_abs_error) << ',' << format_double(row.mean_rel_error) << ','
                    << detail::join_vector(row.learned_var) << ',' << detail::join_vector(row.exact_var) << ',' << format_double(row.var_rel_error) << ','
                    << format_double(row.cov_abs_error) << '\n';
                const std::string tag = "q" + std::to_string(q);
                add_plot("cond_mean_learned_" + tag, row.mu[0], row.learned_mean[0]);
                add_plot("cond_mean_exact_" + tag, row.mu[0], row.exact_mean[0]);
                add_plot("cond_var_learned_" + tag, row.mu[0], row.learned_var[0]);
                add_plot("cond_var_exact_" + tag, row.mu[0], row.exact_var[0]);
            }
        }
        detail::close_report(out, path);
    }
    {
        const auto path = dir / "heatmap.csv";
        auto out = detail::open_report(path);
        out << "map,x_query,coordinate,mu,value,learned_density,exact_density\n";
        for (std::size_t h = 0; h < r.heatmaps.size(); ++h) {
            const auto& map = r.heatmaps[h];
            for (std::size_t k = 0; k < map.mu_grid.size(); ++k)
                for (std::size_t v = 0; v < map.value_grid.size(); ++v)
                    out << h << ',' << detail::join_vector(map.x_query) << ',' << map.coordinate << ',' << detail::join_vector(map.mu_grid[k]) << ','
                        << format_double(map.value_grid[v]) << ',' << format_double(map.learned(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k)))
                        << ',' << format_double(map.exact(static_cast<Eigen::Index>(v), static_cast<Eigen::Index>(k))) << '\n';
        }
        detail::close_report(out, path);
    }
    {
        const auto path = dir / "terminal.csv";
        auto out = detail::open_report(path);
        out << "mu,n_steps,n_traj,learned_mean,exact_mean,learned_std,exact_std,mean_abs_error,std_abs_error\n";
        for (const auto& t : r.terminal)
            out << detail::join_vector(t.mu) << ',' << t.n_steps << ',' << t.n_traj << ',' << detail::join_vector(t.learned_mean) << ','
                << detail::join_vector(t.exact_mean) << ',' << detail::join_vector(t.learned_std) << ',' << detail::join_vector(t.exact_std) << ','
                << format_double(t.mean_abs_error) << ',' << format_double(t.std_abs_error) << '\n';
        detail::close_report(out, path);
    }
    {
        const auto path = dir / "variance.csv";
        auto out = detail::open_report(path);
        out << "x0,mu,step,time,learned_var,exact_var\n";
        for (std::size_t e = 0; e < r.variance.size(); ++e) {
            const auto& v = r.variance[e];
            for (const auto& s : v.steps) {
                out << detail::join_vector(v.x0) << ',' << detail::join_vector(v.mu) << ',' << s.step << ',' << format_double(s.time) << ','
                    << detail::join_vector(s.learned_var) << ',' << detail::join_vector(s.exact_var) << '\n';
                add_plot("var_learned_" + std::to_string(e), s.time, s.learned_var[0]);
                add_plot("var_exact_" + std::to_string(e), s.time, s.exact_var[0]);
            }
        }
        detail::close_report(out, path);
    }
    {
        const auto path = dir / "plot_data.csv";
        auto out = detail::open_report(path);
        out << plot;
        detail::close_report(out, path);
    }
    {
        const auto path = dir / "summary.json";
        auto out = detail::open_report(path);
        out << report_summary(r).dump(2) << '\n';
        detail::close_report(out, path);
    }
}

}  // namespace pflow
