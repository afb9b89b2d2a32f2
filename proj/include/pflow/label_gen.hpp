#pragma once

// Labeled data for supervised flow-map regression: each latent z is carried
// to a displacement by integrating the probability-flow ODE backwards in
// diffusion time with the kernel-weighted score of its query's neighbours.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pflow/binary_io.hpp"
#include "pflow/errors.hpp"
#include "pflow/neighbors.hpp"
#include "pflow/parallel.hpp"
#include "pflow/rng.hpp"
#include "pflow/score.hpp"
#include "pflow/simulate.hpp"

namespace pflow {

enum class QuerySampling {
    Uniform,      // records drawn uniformly with replacement
    StratifiedMu  // sample m uses grid value m mod N_mu, then a uniform record at that value
};

struct OdeConfig {
    std::size_t n_tau = 1000;
    ScoreConfig score;
    VpSchedule sched = VpSchedule::for_steps(1000);
    std::size_t n_samples = 50000;  // M
    QuerySampling sampling = QuerySampling::Uniform;
    unsigned workers = 0;

    /// Config whose clamp follows n_tau.
    static OdeConfig make(std::size_t n_tau, ScoreConfig score, std::size_t n_samples, double delta = kDefaultDelta)
    {
        OdeConfig c;
        c.n_tau = n_tau;
        c.score = score;
        c.sched = VpSchedule::for_steps(n_tau, delta);
        c.n_samples = n_samples;
        return c;
    }

    void validate() const
    {
        detail::require(n_tau >= 2, "labels: n_tau must be at least 2");
        detail::require(n_samples >= 1, "labels: M must be at least 1");
        score.validate();
        sched.validate();
    }
};

/// View of one quadruple (x_n, mu, z, x_hat_{n+1}).
struct LabeledSample {
    std::span<const double> x_n;
    std::span<const double> mu;
    std::span<const double> z;
    std::span<const double> x_hat_np1;
};

/// Row-major store; one row is [x_n (d), mu (d_mu), z (d), x_hat (d)].
class LabeledDataset {
public:
    LabeledDataset() = default;
    LabeledDataset(std::size_t d, std::size_t d_mu) : d_(d), d_mu_(d_mu) {}

    std::size_t d() const { return d_; }
    std::size_t d_mu() const { return d_mu_; }
    std::size_t row_width() const { return 3 * d_ + d_mu_; }
    std::size_t size() const { return row_width() == 0 ? 0 : rows_.size() / row_width(); }
    bool empty() const { return size() == 0; }

    LabeledSample sample(std::size_t m) const
    {
        const double* row = rows_.data() + m * row_width();
        return {{row, d_}, {row + d_, d_mu_}, {row + d_ + d_mu_, d_}, {row + 2 * d_ + d_mu_, d_}};
    }

    void push_back(std::span<const double> x_n, std::span<const double> mu, std::span<const double> z, std::span<const double> x_hat)
    {
        detail::require(x_n.size() == d_ && mu.size() == d_mu_ && z.size() == d_ && x_hat.size() == d_, "labeled sample has wrong shape");
        rows_.insert(rows_.end(), x_n.begin(), x_n.end());
        rows_.insert(rows_.end(), mu.begin(), mu.end());
        rows_.insert(rows_.end(), z.begin(), z.end());
        rows_.insert(rows_.end(), x_hat.begin(), x_hat.end());
    }

    /// Subset in the given order.
    LabeledDataset select(std::span<const std::size_t> which) const
    {
        LabeledDataset out(d_, d_mu_);
        out.model_name = model_name;
        out.dt = dt;
        out.rows_.reserve(which.size() * row_width());
        for (const std::size_t m : which) {
            const auto first = rows_.begin() + static_cast<std::ptrdiff_t>(m * row_width());
            out.rows_.insert(out.rows_.end(), first, first + static_cast<std::ptrdiff_t>(row_width()));
        }
        return out;
    }

    std::vector<double>& raw() { return rows_; }
    const std::vector<double>& raw() const { return rows_; }

    std::string model_name;
    double dt = 0.0;

private:
    std::size_t d_ = 0;
    std::size_t d_mu_ = 0;
    std::vector<double> rows_;
};

/// Explicit Euler from tau = 1 down to tau = 0 on tau_k = k / n_tau:
///   Z_{k-1} = Z_k - dtau [f(tau_k) Z_k - g^2(tau_k) S(Z_k, tau_k) / 2].
/// Returns Z_0, the displacement paired with z1.
inline Vector reverse_ode_solve(const Vector& z1, const NeighborKernel& kernel, const OdeConfig& cfg)
{
    detail::require(static_cast<std::size_t>(z1.size()) == kernel.d(), "reverse_ode_solve: latent has wrong length");
    detail::require(z1.allFinite(), "reverse_ode_solve: latent is not finite");
    detail::require(cfg.n_tau >= 1, "reverse_ode_solve: n_tau must be positive");
    const std::size_t d = kernel.d();
    const double dtau = 1.0 / static_cast<double>(cfg.n_tau);
    Vector z = z1;
    Vector s(z.size());
    std::vector<double> scratch;
    for (std::size_t k = cfg.n_tau; k >= 1; --k) {
        const double tau = static_cast<double>(k) / static_cast<double>(cfg.n_tau);
        kernel.score({z.data(), d}, tau, cfg.sched, {s.data(), d}, scratch);
        const double f = cfg.sched.drift_f(tau);
        const double g2 = cfg.sched.diff_g_sq(tau);
        for (std::size_t i = 0; i < d; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            z[ii] -= dtau * (f * z[ii] - 0.5 * g2 * s[ii]);
        }
        if (!z.allFinite()) throw NumericError("reverse ODE: non-finite state at step k=" + std::to_string(k));
    }
    return z;
}

/// Convenience form: every record of `neighbors` is a neighbour of (x, mu).
inline Vector reverse_ode_solve(const Vector& z1, const Vector& query_x, const Vector& query_mu, const ObservedDataset& neighbors,
                                const OdeConfig& cfg)
{
    const NeighborKernel kernel({query_x.data(), static_cast<std::size_t>(query_x.size())},
                                {query_mu.data(), static_cast<std::size_t>(query_mu.size())}, neighbors, cfg.score);
    return reverse_ode_solve(z1, kernel, cfg);
}

namespace detail {

inline std::vector<std::vector<std::size_t>> records_by_mu(const ObservedDataset& ds)
{
    require(!ds.mu_grid.empty(), "labels: stratified sampling needs the dataset's mu grid");
    std::vector<std::vector<std::size_t>> groups(ds.mu_grid.size());
    for (std::size_t j = 0; j < ds.size(); ++j) {
        const auto mu = ds.record(j).mu;
        for (std::size_t g = 0; g < ds.mu_grid.size(); ++g) {
            if (std::equal(mu.begin(), mu.end(), ds.mu_grid[g].data())) {
                groups[g].push_back(j);
                break;
            }
        }
    }
    for (const auto& g : groups) require(!g.empty(), "labels: a mu grid value has no records");
    return groups;
}

}  // namespace detail

/// Builds the augmented dataset. Sample m draws its query record and latent
/// from substreams keyed by m, so the result is independent of `workers`.
/// The neighbour query is made once per sample since (x_n, mu) is fixed along
/// the ODE path.
inline LabeledDataset generate_labels(const ObservedDataset& ds, const NeighborIndex& idx, const OdeConfig& cfg, RngSeed seed)
{
    cfg.validate();
    detail::require(!ds.empty(), "labels: observed dataset is empty");
    detail::require(idx.size() == ds.size() && idx.dims() == ds.d() + ds.d_mu(), "labels: neighbour index does not match the dataset");

    const std::size_t d = ds.d();
    const std::size_t d_mu = ds.d_mu();
    LabeledDataset out(d, d_mu);
    out.model_name = ds.model_name;
    out.dt = ds.dt;
    const std::size_t width = out.row_width();
    out.raw().assign(cfg.n_samples * width, 0.0);

    std::vector<std::vector<std::size_t>> groups;
    if (cfg.sampling == QuerySampling::StratifiedMu) groups = detail::records_by_mu(ds);

    parallel_for(cfg.n_samples, cfg.workers, [&](std::size_t m) {
        auto query_rng = substream(seed, StreamTag::LabelQuery, {m});
        std::size_t j = 0;
        if (cfg.sampling == QuerySampling::Uniform) {
            j = static_cast<std::size_t>(query_rng.below(ds.size()));
        } else {
            const auto& group = groups[m % groups.size()];
            j = group[static_cast<std::size_t>(query_rng.below(group.size()))];
        }
        const auto rec = ds.record(j);

        auto latent_rng = substream(seed, StreamTag::LabelLatent, {m});
        Vector z1(static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < d; ++i) z1[static_cast<Eigen::Index>(i)] = latent_rng.normal();

        const auto neighbors = idx.k_nearest(rec.x_n, rec.mu, cfg.score.n_neighbors);
        const NeighborKernel kernel(rec.x_n, rec.mu, ds, neighbors, cfg.score);
        Vector disp;
        try {
            disp = reverse_ode_solve(z1, kernel, cfg);
        } catch (const NumericError& e) {
            throw NumericError("labels: sample " + std::to_string(m) + ": " + e.what());
        }

        double* row = out.raw().data() + m * width;
        std::copy(rec.x_n.begin(), rec.x_n.end(), row);
        std::copy(rec.mu.begin(), rec.mu.end(), row + d);
        std::copy(z1.data(), z1.data() + d, row + d + d_mu);
        for (std::size_t i = 0; i < d; ++i) row[2 * d + d_mu + i] = rec.x_n[i] + disp[static_cast<Eigen::Index>(i)];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr std::string_view kLabelsMagic = "PFLB";
inline constexpr std::uint16_t kLabelsVersion = 1;

inline io::ByteWriter encode_labels(const LabeledDataset& labels)
{
    io::ByteWriter out;
    out.reserve(64 + labels.raw().size() * 8);
    out.magic(kLabelsMagic);
    out.u16(kLabelsVersion);
    out.u64(labels.d());
    out.u64(labels.d_mu());
    out.u64(labels.size());
    for (const double v : labels.raw()) out.f64(v);
    const nlohmann::json meta = {{"model", labels.model_name}, {"dt", labels.dt}};
    out.text(meta.dump());
    return out;
}

inline void save_labels(const LabeledDataset& labels, const std::filesystem::path& path) { encode_labels(labels).write_file(path); }

inline LabeledDataset load_labels(const std::filesystem::path& path)
{
    auto in = io::ByteReader::from_file(path);
    in.expect_magic(kLabelsMagic);
    io::expect_version(in, kLabelsVersion);
    const std::uint64_t d = in.u64();
    const std::uint64_t d_mu = in.u64();
    const std::uint64_t count = in.u64();
    if (d == 0 || d_mu == 0) throw FormatError(in.source() + ": zero dimension in header");
    const std::uint64_t values = io::checked_mul(count, 3 * d + d_mu, in.source());
    in.expect_remaining_at_least(io::checked_mul(values, 8, in.source()), "samples");

    LabeledDataset labels(d, d_mu);
    labels.raw().resize(values);
    for (auto& v : labels.raw()) v = in.f64();
    try {
        const auto meta = nlohmann::json::parse(in.text());
        labels.model_name = meta.at("model").get<std::string>();
        labels.dt = meta.at("dt").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(in.source() + ": bad metadata trailer: " + e.what());
    }
    return labels;
}

inline void export_labels_csv(const LabeledDataset& labels, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    bool first = true;
    auto add = [&](const char* name, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            out << (first ? "" : ",") << name << '[' << i << ']';
            first = false;
        }
    };
    add("x_n", labels.d());
    add("mu", labels.d_mu());
    add("z", labels.d());
    add("x_hat_np1", labels.d());
    out << '\n';
    const std::size_t width = labels.row_width();
    for (std::size_t m = 0; m < labels.size(); ++m) {
        for (std::size_t c = 0; c < width; ++c) out << (c ? "," : "") << format_double(labels.raw()[m * width + c]);
        out << '\n';
    }
}

}  // namespace pflow
