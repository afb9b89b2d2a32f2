#pragma once

// Variance-preserving diffusion schedule and the training-free conditional
// score estimator built from kernel-weighted neighbour displacements.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "pflow/errors.hpp"
#include "pflow/sde_models.hpp"
#include "pflow/simulate.hpp"

namespace pflow {

inline constexpr double kDefaultDelta = 1e-4;

/// alpha(tau) = 1 - tau, beta^2(tau) = tau on tau in [0, 1], with the forward
/// coefficients f = d log(alpha)/dtau and g^2 = d beta^2/dtau - 2 f beta^2.
/// f and g^2 are evaluated at min(tau, 1 - tau_clip) because f diverges at 1.
struct VpSchedule {
    double delta_reg = kDefaultDelta;
    double tau_clip = 1e-3;

    /// Clamp of 1 / (2 n_tau), half an ODE step below the singularity.
    static VpSchedule for_steps(std::size_t n_tau, double delta = kDefaultDelta)
    {
        detail::require(n_tau >= 1, "VpSchedule: n_tau must be positive");
        return {delta, 1.0 / (2.0 * static_cast<double>(n_tau))};
    }

    static double alpha(double tau)
    {
        check_range(tau);
        return 1.0 - tau;
    }

    static double beta_sq(double tau)
    {
        check_range(tau);
        return tau;
    }

    double clamp(double tau) const
    {
        check_range(tau);
        return std::min(tau, 1.0 - tau_clip);
    }

    double drift_f(double tau) const { return -1.0 / (1.0 - clamp(tau)); }

    double diff_g_sq(double tau) const
    {
        const double t = clamp(tau);
        return (1.0 + t) / (1.0 - t);
    }

    void validate() const
    {
        detail::require(delta_reg >= 0.0 && std::isfinite(delta_reg), "VpSchedule: delta must be nonnegative");
        detail::require(tau_clip > 0.0 && tau_clip < 1.0, "VpSchedule: tau_clip must lie in (0, 1)");
    }

private:
    static void check_range(double tau)
    {
        if (!(tau >= 0.0 && tau <= 1.0)) throw ValidationError("diffusion time tau must lie in [0, 1]");
    }
};

struct ScoreConfig {
    std::size_t n_neighbors = 2000;  // N
    double nu_x = 1.0;
    double nu_mu = 0.5;

    void validate() const
    {
        detail::require(n_neighbors >= 1, "score: N must be at least 1");
        detail::require(nu_x > 0.0 && std::isfinite(nu_x), "score: nu_x must be positive");
        detail::require(nu_mu > 0.0 && std::isfinite(nu_mu), "score: nu_mu must be positive");
    }
};

/// Neighbour displacements and their spatial/parameter log-kernels for one
/// query (x_n, mu). These do not depend on (z, tau), so they are computed once
/// and reused across every step of the reverse ODE.
class NeighborKernel {
public:
    NeighborKernel(std::span<const double> query_x, std::span<const double> query_mu, const ObservedDataset& ds,
                   std::span<const std::size_t> indices, const ScoreConfig& cfg)
        : d_(ds.d())
    {
        cfg.validate();
        detail::require(!indices.empty(), "score: neighbour list is empty");
        detail::require(query_x.size() == ds.d() && query_mu.size() == ds.d_mu(), "score: query has wrong shape");
        disp_.resize(indices.size() * d_);
        log_prior_.resize(indices.size());
        for (std::size_t l = 0; l < indices.size(); ++l) {
            const auto rec = ds.record(indices[l]);
            double sx = 0.0;
            for (std::size_t i = 0; i < d_; ++i) {
                disp_[l * d_ + i] = rec.x_np1[i] - rec.x_n[i];
                const double u = (query_x[i] - rec.x_n[i]) / cfg.nu_x;
                sx += u * u;
            }
            double smu = 0.0;
            for (std::size_t i = 0; i < rec.mu.size(); ++i) {
                const double u = (query_mu[i] - rec.mu[i]) / cfg.nu_mu;
                smu += u * u;
            }
            log_prior_[l] = -0.5 * sx - 0.5 * smu;
        }
    }

    /// All records of `neighbors`, in order.
    NeighborKernel(std::span<const double> query_x, std::span<const double> query_mu, const ObservedDataset& neighbors, const ScoreConfig& cfg)
        : NeighborKernel(query_x, query_mu, neighbors, all_indices(neighbors.size()), cfg)
    {
    }

    std::size_t d() const { return d_; }
    std::size_t count() const { return log_prior_.size(); }
    std::span<const double> displacements() const { return disp_; }
    std::span<const double> log_prior() const { return log_prior_; }

    /// Normalized weights w_l into `weights` (resized to count()). Computed as
    /// max-shifted exponentials of the summed log-kernels; score() fuses the
    /// same steps with the weighted sum.
    void weights(std::span<const double> z, double tau, const VpSchedule& sched, std::vector<double>& weights) const
    {
        const double alpha = VpSchedule::alpha(tau);
        const double var = VpSchedule::beta_sq(tau) + sched.delta_reg;
        const std::size_t n = count();
        weights.resize(n);
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < n; ++l) {
            double r2 = 0.0;
            for (std::size_t i = 0; i < d_; ++i) {
                const double u = z[i] - alpha * disp_[l * d_ + i];
                r2 += u * u;
            }
            const double lw = log_prior_[l] - r2 / (2.0 * var);
            weights[l] = lw;
            top = std::max(top, lw);
        }
        if (!std::isfinite(top)) throw NumericError("score: degenerate weights (every log-weight is -inf or NaN)");
        double total = 0.0;
        for (std::size_t l = 0; l < n; ++l) {
            weights[l] = std::exp(weights[l] - top);
            total += weights[l];
        }
        const double inv = 1.0 / total;
        for (auto& w : weights) w *= inv;
    }

    /// S(z, tau) = sum_l w_l * (-(z - alpha dx_l) / (beta^2 + delta)), written
    /// into `out`. `scratch` is workspace and may be reused across calls.
    void score(std::span<const double> z, double tau, const VpSchedule& sched, std::span<double> out, std::vector<double>& scratch) const
    {
        for (std::size_t i = 0; i < d_; ++i)
            if (!std::isfinite(z[i])) throw NumericError("score: non-finite diffusion state");
        const double alpha = VpSchedule::alpha(tau);
        const double var = VpSchedule::beta_sq(tau) + sched.delta_reg;
        const std::size_t n = count();
        scratch.assign(n + d_, 0.0);  // log-weights, then the weighted sum
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t l = 0; l < n; ++l) {
            double r2 = 0.0;
            for (std::size_t i = 0; i < d_; ++i) {
                const double u = z[i] - alpha * disp_[l * d_ + i];
                r2 += u * u;
            }
            scratch[l] = log_prior_[l] - r2 / (2.0 * var);
            top = std::max(top, scratch[l]);
        }
        if (!std::isfinite(top)) throw NumericError("score: degenerate weights (every log-weight is -inf or NaN)");

        // Weights sum to one, so the mixture of local scores collapses onto the
        // weighted mean displacement.
        double total = 0.0;
        double* m = scratch.data() + n;
        for (std::size_t l = 0; l < n; ++l) {
            const double e = std::exp(scratch[l] - top);
            total += e;
            for (std::size_t i = 0; i < d_; ++i) m[i] += e * disp_[l * d_ + i];
        }
        for (std::size_t i = 0; i < d_; ++i) out[i] = -(z[i] - alpha * (m[i] / total)) / var;
    }

private:
    static std::vector<std::size_t> all_indices(std::size_t n)
    {
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        return idx;
    }

    std::size_t d_;
    std::vector<double> disp_;       // count() x d, row-major
    std::vector<double> log_prior_;  // spatial + parameter log-kernels
};

/// Kernel-weighted Monte Carlo score at (z, tau) for the query (x, mu), using
/// every record of `neighbors` as a sample.
inline Vector estimate_score(const Vector& z, double tau, const Vector& query_x, const Vector& query_mu, const ObservedDataset& neighbors,
                             const ScoreConfig& cfg, const VpSchedule& sched)
{
    detail::require(static_cast<std::size_t>(z.size()) == neighbors.d(), "estimate_score: z has wrong length");
    const NeighborKernel kernel({query_x.data(), static_cast<std::size_t>(query_x.size())},
                                {query_mu.data(), static_cast<std::size_t>(query_mu.size())}, neighbors, cfg);
    Vector out(z.size());
    std::vector<double> scratch;
    kernel.score({z.data(), static_cast<std::size_t>(z.size())}, tau, sched, {out.data(), static_cast<std::size_t>(out.size())}, scratch);
    return out;
}

/// Closed-form score when the displacement law is N(m, s_sq I):
/// -(z - alpha m) / (alpha^2 s_sq + beta^2), denominator floored at `floor`.
inline Vector exact_gaussian_score(const Vector& z, double tau, const Vector& m, double s_sq, double floor = kDefaultDelta)
{
    detail::require(s_sq >= 0.0, "exact_gaussian_score: variance must be nonnegative");
    detail::require(z.size() == m.size(), "exact_gaussian_score: z and m differ in length");
    const double alpha = VpSchedule::alpha(tau);
    const double denom = std::max(alpha * alpha * s_sq + VpSchedule::beta_sq(tau), floor);
    return -(z - alpha * m) / denom;
}

/// Exact score of the forward-diffused empirical law sum_l delta(dx_l) / L:
/// the ratio of the Gaussian-weighted sum of local scores to the sum of the
/// Gaussian transition densities. Only the diffusion kernel enters.
inline Vector empirical_exact_score(const Vector& z, double tau, const std::vector<Vector>& displacements, const VpSchedule& sched)
{
    detail::require(!displacements.empty(), "empirical_exact_score: no displacements");
    const double alpha = VpSchedule::alpha(tau);
    const double var = VpSchedule::beta_sq(tau) + sched.delta_reg;

    std::vector<double> log_q(displacements.size());
    for (std::size_t l = 0; l < displacements.size(); ++l) log_q[l] = -(z - alpha * displacements[l]).squaredNorm() / (2.0 * var);
    const double top = *std::max_element(log_q.begin(), log_q.end());

    Vector numerator = Vector::Zero(z.size());
    double denominator = 0.0;
    for (std::size_t l = 0; l < displacements.size(); ++l) {
        const double q = std::exp(log_q[l] - top);
        const Vector local = -(z - alpha * displacements[l]) / var;
        numerator += q * local;
        denominator += q;
    }
    return numerator / denominator;
}

}  // namespace pflow
