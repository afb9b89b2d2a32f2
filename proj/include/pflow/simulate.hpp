#pragma once

// Observed transition data: Euler-Maruyama (or exact Gaussian) simulation on a
// fine grid, recorded every dt, plus the PFDS binary container and CSV export.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pflow/binary_io.hpp"
#include "pflow/errors.hpp"
#include "pflow/parallel.hpp"
#include "pflow/rng.hpp"
#include "pflow/sde_models.hpp"

namespace pflow {

/// View of one observed triple (x_n, mu, x_{n+1}).
struct TransitionRecord {
    std::span<const double> x_n;
    std::span<const double> mu;
    std::span<const double> x_np1;
};

/// Flat, row-major store of transition records; one row is
/// [x_n (d), mu (d_mu), x_np1 (d)], the same layout as the PFDS payload.
class ObservedDataset {
public:
    ObservedDataset() = default;
    ObservedDataset(std::size_t d, std::size_t d_mu) : d_(d), d_mu_(d_mu) {}

    std::size_t d() const { return d_; }
    std::size_t d_mu() const { return d_mu_; }
    std::size_t row_width() const { return 2 * d_ + d_mu_; }
    std::size_t size() const { return row_width() == 0 ? 0 : rows_.size() / row_width(); }
    bool empty() const { return size() == 0; }

    TransitionRecord record(std::size_t j) const
    {
        const double* row = rows_.data() + j * row_width();
        return {{row, d_}, {row + d_, d_mu_}, {row + d_ + d_mu_, d_}};
    }

    void push_back(std::span<const double> x_n, std::span<const double> mu, std::span<const double> x_np1)
    {
        detail::require(x_n.size() == d_ && x_np1.size() == d_ && mu.size() == d_mu_, "dataset record has wrong shape");
        rows_.insert(rows_.end(), x_n.begin(), x_n.end());
        rows_.insert(rows_.end(), mu.begin(), mu.end());
        rows_.insert(rows_.end(), x_np1.begin(), x_np1.end());
    }

    std::vector<double>& raw() { return rows_; }
    const std::vector<double>& raw() const { return rows_; }

    double dt = 0.0;
    std::string model_name;
    std::vector<Vector> mu_grid;
    std::size_t n_traj = 0;
    std::size_t n_steps = 0;

private:
    std::size_t d_ = 0;
    std::size_t d_mu_ = 0;
    std::vector<double> rows_;
};

struct InitialLaw {
    enum class Kind { Uniform, Stationary, Gaussian, Point };
    Kind kind = Kind::Uniform;
    Vector lower;  // Uniform
    Vector upper;  // Uniform
    Vector mean;   // Gaussian, Point
    Matrix cov;    // Gaussian

    static InitialLaw uniform(Vector lo, Vector hi) { return {Kind::Uniform, std::move(lo), std::move(hi), {}, {}}; }
    static InitialLaw stationary() { return {Kind::Stationary, {}, {}, {}, {}}; }
    static InitialLaw gaussian(Vector m, Matrix c) { return {Kind::Gaussian, {}, {}, std::move(m), std::move(c)}; }
    static InitialLaw point(Vector x) { return {Kind::Point, {}, {}, std::move(x), {}}; }

    Vector sample(const SdeModel& model, const Vector& mu, RandomStream& rng) const
    {
        switch (kind) {
        case Kind::Uniform: {
            Vector x(lower.size());
            for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng.uniform(lower[i], upper[i]);
            return x;
        }
        case Kind::Stationary:
            return sample_stationary(model, mu, rng);
        case Kind::Gaussian:
            return sample_gaussian({mean, cov}, rng);
        case Kind::Point:
            return mean;
        }
        return {};
    }

    void validate(const SdeModel& model) const
    {
        const auto d = static_cast<Eigen::Index>(model.d);
        switch (kind) {
        case Kind::Uniform:
            detail::require(lower.size() == d && upper.size() == d, "initial law: uniform bounds must have length d");
            for (Eigen::Index i = 0; i < d; ++i) detail::require(upper[i] >= lower[i], "initial law: uniform upper < lower");
            break;
        case Kind::Stationary:
            (void)stationary_variance(model, (model.mu_domain.lower + model.mu_domain.upper) / 2.0);
            break;
        case Kind::Gaussian:
            detail::require(mean.size() == d && cov.rows() == d && cov.cols() == d, "initial law: gaussian mean/cov have wrong shape");
            break;
        case Kind::Point:
            detail::require(mean.size() == d, "initial law: point has wrong length");
            break;
        }
    }
};

enum class Stepper { EulerMaruyama, ExactGaussian };

struct SimulationConfig {
    std::size_t n_mu = 21;
    std::size_t n_traj = 5000;
    double horizon = 1.0;  // T
    double dt = 0.1;       // recording step
    double fine_dt = 1e-3;
    InitialLaw init = InitialLaw::uniform(Vector::Constant(1, -5.0), Vector::Constant(1, 5.0));
    Stepper stepper = Stepper::EulerMaruyama;
    RngSeed seed{0};
    unsigned workers = 0;
};

namespace detail {

/// round(a / b) when a / b is within 1e-9 (relative) of an integer.
inline std::size_t integral_ratio(double a, double b, const char* what)
{
    const double r = a / b;
    const double n = std::round(r);
    if (n < 1.0 || std::abs(r - n) > 1e-9 * std::max(1.0, n))
        throw ValidationError(std::string(what) + " is not a positive integer multiple");
    return static_cast<std::size_t>(n);
}

}  // namespace detail

/// Uniformly spaced parameter values on the model's box. For d_mu > 1 this is
/// the tensor grid with n_mu points per axis. A single point sits mid-box.
inline std::vector<Vector> uniform_mu_grid(const ParamBox& box, std::size_t n_mu)
{
    detail::require(n_mu >= 1, "n_mu must be at least 1");
    const auto dims = static_cast<std::size_t>(box.lower.size());
    std::size_t total = 1;
    for (std::size_t a = 0; a < dims; ++a) total *= n_mu;
    std::vector<Vector> grid;
    grid.reserve(total);
    for (std::size_t flat = 0; flat < total; ++flat) {
        Vector mu(static_cast<Eigen::Index>(dims));
        std::size_t rest = flat;
        for (std::size_t a = dims; a-- > 0;) {
            const std::size_t k = rest % n_mu;
            rest /= n_mu;
            const auto ai = static_cast<Eigen::Index>(a);
            mu[ai] = n_mu == 1 ? 0.5 * (box.lower[ai] + box.upper[ai])
                               : box.lower[ai] + (box.upper[ai] - box.lower[ai]) * static_cast<double>(k) / static_cast<double>(n_mu - 1);
        }
        grid.push_back(std::move(mu));
    }
    return grid;
}

/// Advances x in place by n_fine Euler-Maruyama steps of size fine_dt.
/// Throws NumericError naming the first step that produced a non-finite state.
inline void euler_maruyama_advance(const SdeModel& model, std::span<double> x, std::span<const double> mu, double fine_dt, std::size_t n_fine,
                                   RandomStream& rng, std::size_t step_offset = 0)
{
    const std::size_t d = model.d;
    const std::size_t m = model.m;
    const double sqrt_dt = std::sqrt(fine_dt);
    std::vector<double> a(d), b(d * m), xi(m);
    for (std::size_t k = 0; k < n_fine; ++k) {
        model.drift_fn(x, mu, a);
        model.diffusion_fn(x, mu, b);
        for (std::size_t j = 0; j < m; ++j) xi[j] = rng.normal();
        for (std::size_t i = 0; i < d; ++i) {
            double noise = 0.0;
            for (std::size_t j = 0; j < m; ++j) noise += b[i * m + j] * xi[j];
            x[i] += a[i] * fine_dt + noise * sqrt_dt;
            if (!std::isfinite(x[i]))
                throw NumericError("Euler-Maruyama: non-finite state at step " + std::to_string(step_offset + k + 1));
        }
    }
}

/// Path of length n_fine + 1 starting at x0.
inline std::vector<Vector> euler_maruyama_path(const SdeModel& model, const Vector& x0, const Vector& mu, double fine_dt, std::size_t n_fine,
                                               RngSeed seed)
{
    model.check_shapes(x0, mu);
    detail::require(fine_dt > 0.0, "euler_maruyama_path: fine_dt must be positive");
    detail::require(n_fine >= 1, "euler_maruyama_path: n_fine must be at least 1");
    auto rng = substream(seed, StreamTag::Trajectory, {0, 0});
    std::vector<Vector> path;
    path.reserve(n_fine + 1);
    path.push_back(x0);
    Vector x = x0;
    for (std::size_t k = 0; k < n_fine; ++k) {
        euler_maruyama_advance(model, {x.data(), model.d}, {mu.data(), model.d_mu}, fine_dt, 1, rng, k);
        path.push_back(x);
    }
    return path;
}

inline Vector exact_gaussian_transition_sample(const SdeModel& model, const Vector& x, const Vector& mu, double dt, RandomStream& rng)
{
    return sample_gaussian(exact_conditional(model, x, mu, dt), rng);
}

/// One draw from the closed-form transition law.
inline Vector exact_gaussian_transition_sample(const SdeModel& model, const Vector& x, const Vector& mu, double dt, RngSeed seed)
{
    auto rng = substream(seed, StreamTag::Trajectory, {0, 0});
    return exact_gaussian_transition_sample(model, x, mu, dt, rng);
}

/// Simulates n_traj trajectories per grid value of mu over [0, T] and records
/// every consecutive pair at spacing dt. Records are ordered by
/// (mu index, trajectory, step), independent of the worker count.
inline ObservedDataset simulate_dataset(const SdeModel& model, const SimulationConfig& cfg)
{
    model.validate();
    detail::require(cfg.n_traj >= 1, "simulate: n_traj must be at least 1");
    detail::require(cfg.dt > 0.0 && cfg.horizon > 0.0, "simulate: dt and T must be positive");
    const std::size_t n_steps = detail::integral_ratio(cfg.horizon, cfg.dt, "simulate: T / dt");
    std::size_t fine_per_step = 1;
    if (cfg.stepper == Stepper::EulerMaruyama) {
        detail::require(cfg.fine_dt > 0.0, "simulate: fine_dt must be positive");
        fine_per_step = detail::integral_ratio(cfg.dt, cfg.fine_dt, "simulate: dt / fine_dt");
    } else {
        (void)detail::oracle_of(model);
    }
    cfg.init.validate(model);

    const std::vector<Vector> grid = uniform_mu_grid(model.mu_domain, cfg.n_mu);
    const std::size_t d = model.d;
    const std::size_t d_mu = model.d_mu;
    const std::size_t width = 2 * d + d_mu;

    ObservedDataset ds(d, d_mu);
    ds.dt = cfg.dt;
    ds.model_name = model.name;
    ds.mu_grid = grid;
    ds.n_traj = cfg.n_traj;
    ds.n_steps = n_steps;
    ds.raw().assign(grid.size() * cfg.n_traj * n_steps * width, 0.0);

    const double fine_dt = cfg.stepper == Stepper::EulerMaruyama ? cfg.dt / static_cast<double>(fine_per_step) : 0.0;
    parallel_for(grid.size() * cfg.n_traj, cfg.workers, [&](std::size_t job) {
        const std::size_t k = job / cfg.n_traj;
        const std::size_t i = job % cfg.n_traj;
        const Vector& mu = grid[k];
        auto init_rng = substream(cfg.seed, StreamTag::InitialState, {k, i});
        auto rng = substream(cfg.seed, StreamTag::Trajectory, {k, i});
        Vector x = cfg.init.sample(model, mu, init_rng);
        double* out = ds.raw().data() + job * n_steps * width;
        for (std::size_t n = 0; n < n_steps; ++n, out += width) {
            std::copy(x.data(), x.data() + d, out);
            std::copy(mu.data(), mu.data() + d_mu, out + d);
            if (cfg.stepper == Stepper::EulerMaruyama)
                euler_maruyama_advance(model, {x.data(), d}, {mu.data(), d_mu}, fine_dt, fine_per_step, rng, n * fine_per_step);
            else
                x = exact_gaussian_transition_sample(model, x, mu, cfg.dt, rng);
            if (!x.allFinite()) throw NumericError("simulate: non-finite state at recording step " + std::to_string(n + 1));
            std::copy(x.data(), x.data() + d, out + d + d_mu);
        }
    });
    return ds;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr std::string_view kDatasetMagic = "PFDS";
inline constexpr std::uint16_t kDatasetVersion = 1;

inline nlohmann::json mu_grid_to_json(const std::vector<Vector>& grid)
{
    auto arr = nlohmann::json::array();
    for (const auto& mu : grid) arr.push_back(std::vector<double>(mu.data(), mu.data() + mu.size()));
    return arr;
}

inline std::vector<Vector> mu_grid_from_json(const nlohmann::json& j)
{
    std::vector<Vector> grid;
    for (const auto& row : j) {
        const auto v = row.get<std::vector<double>>();
        grid.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    return grid;
}

inline io::ByteWriter encode_dataset(const ObservedDataset& ds)
{
    io::ByteWriter out;
    out.reserve(64 + ds.raw().size() * 8);
    out.magic(kDatasetMagic);
    out.u16(kDatasetVersion);
    out.u64(ds.d());
    out.u64(ds.d_mu());
    out.u64(ds.size());
    for (const double v : ds.raw()) out.f64(v);
    const nlohmann::json meta = {
        {"model", ds.model_name}, {"dt", ds.dt}, {"mu_grid", mu_grid_to_json(ds.mu_grid)}, {"n_traj", ds.n_traj}, {"n_steps", ds.n_steps}};
    out.text(meta.dump());
    return out;
}

inline void save_dataset(const ObservedDataset& ds, const std::filesystem::path& path)
{
    encode_dataset(ds).write_file(path);
}

inline ObservedDataset load_dataset(const std::filesystem::path& path)
{
    auto in = io::ByteReader::from_file(path);
    in.expect_magic(kDatasetMagic);
    io::expect_version(in, kDatasetVersion);
    const std::uint64_t d = in.u64();
    const std::uint64_t d_mu = in.u64();
    const std::uint64_t count = in.u64();
    if (d == 0 || d_mu == 0) throw FormatError(in.source() + ": zero dimension in header");
    const std::uint64_t values = io::checked_mul(count, 2 * d + d_mu, in.source());
    in.expect_remaining_at_least(io::checked_mul(values, 8, in.source()), "records");

    ObservedDataset ds(d, d_mu);
    ds.raw().resize(values);
    for (auto& v : ds.raw()) v = in.f64();
    try {
        const auto meta = nlohmann::json::parse(in.text());
        ds.model_name = meta.at("model").get<std::string>();
        ds.dt = meta.at("dt").get<double>();
        ds.mu_grid = mu_grid_from_json(meta.at("mu_grid"));
        ds.n_traj = meta.at("n_traj").get<std::size_t>();
        ds.n_steps = meta.at("n_steps").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(in.source() + ": bad metadata trailer: " + e.what());
    }
    return ds;
}

inline std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Human-readable export, 17 significant digits.
inline void export_dataset_csv(const ObservedDataset& ds, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    std::string header;
    auto add = [&](const char* name, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!header.empty()) header += ',';
            header += std::string(name) + "[" + std::to_string(i) + "]";
        }
    };
    add("x_n", ds.d());
    add("mu", ds.d_mu());
    add("x_np1", ds.d());
    out << header << '\n';
    const std::size_t width = ds.row_width();
    for (std::size_t j = 0; j < ds.size(); ++j) {
        for (std::size_t c = 0; c < width; ++c) out << (c ? "," : "") << format_double(ds.raw()[j * width + c]);
        out << '\n';
    }
}

}  // namespace pflow
