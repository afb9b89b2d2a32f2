#pragma once

// Parameter-dependent SDEs dX = a(X, mu) dt + b(X, mu) dW and the three
// benchmark models, together with their closed-form transition statistics.

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pflow/errors.hpp"
#include "pflow/rng.hpp"

namespace pflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Axis-aligned box in parameter space.
struct ParamBox {
    Vector lower;
    Vector upper;

    bool contains(const Vector& mu) const
    {
        if (mu.size() != lower.size()) return false;
        for (Eigen::Index i = 0; i < mu.size(); ++i)
            if (mu[i] < lower[i] || mu[i] > upper[i]) return false;
        return true;
    }
};

enum class Benchmark {
    BrownianDrift,  // a = mu, b = 1
    ScalarOu,       // a = -mu x, b = sqrt(1 + mu^2)
    RotatingOu,     // a = -A(mu) x, b = sigma I
};

/// Fixed constants of the rotating 2-d OU benchmark.
struct RotatingOuConstants {
    static constexpr double sigma = 0.5;
    static constexpr double omega = 1.0;
};

struct SdeModel {
    /// Writes a(x, mu) into out (length d).
    using DriftFn = std::function<void(std::span<const double> x, std::span<const double> mu, std::span<double> out)>;
    /// Writes b(x, mu) into out (d x m, row-major).
    using DiffusionFn = DriftFn;

    std::string name;
    std::size_t d = 0;
    std::size_t m = 0;
    std::size_t d_mu = 0;
    ParamBox mu_domain;
    DriftFn drift_fn;
    DiffusionFn diffusion_fn;
    std::optional<Benchmark> benchmark;

    Vector drift(const Vector& x, const Vector& mu) const
    {
        check_shapes(x, mu);
        Vector out = Vector::Zero(static_cast<Eigen::Index>(d));
        drift_fn({x.data(), d}, {mu.data(), d_mu}, {out.data(), d});
        return out;
    }

    Matrix diffusion(const Vector& x, const Vector& mu) const
    {
        check_shapes(x, mu);
        std::vector<double> buf(d * m, 0.0);
        diffusion_fn({x.data(), d}, {mu.data(), d_mu}, buf);
        Matrix out(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(m));
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < m; ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = buf[i * m + j];
        return out;
    }

    void check_shapes(const Vector& x, const Vector& mu) const
    {
        detail::require(static_cast<std::size_t>(x.size()) == d,
                        "model " + name + ": state has length " + std::to_string(x.size()) + ", expected " + std::to_string(d));
        detail::require(static_cast<std::size_t>(mu.size()) == d_mu,
                        "model " + name + ": parameter has length " + std::to_string(mu.size()) + ", expected " + std::to_string(d_mu));
    }

    /// Structural checks: positive dimensions, callable coefficients, a
    /// parameter box with positive extent on every axis.
    void validate() const
    {
        detail::require(d > 0 && m > 0 && d_mu > 0, "model " + name + ": dimensions must be positive");
        detail::require(static_cast<bool>(drift_fn) && static_cast<bool>(diffusion_fn), "model " + name + ": missing coefficient function");
        detail::require(static_cast<std::size_t>(mu_domain.lower.size()) == d_mu && static_cast<std::size_t>(mu_domain.upper.size()) == d_mu,
                        "model " + name + ": mu_domain has wrong dimension");
        for (std::size_t i = 0; i < d_mu; ++i)
            detail::require(mu_domain.upper[static_cast<Eigen::Index>(i)] > mu_domain.lower[static_cast<Eigen::Index>(i)],
                            "model " + name + ": mu_domain must have positive extent on every axis");
    }

    /// Evaluates both coefficients once and reports any non-finite output.
    /// This is the only well-posedness check performed on black-box models.
    void check_finite_at(const Vector& x, const Vector& mu) const
    {
        const Vector a = drift(x, mu);
        const Matrix b = diffusion(x, mu);
        if (!a.allFinite() || !b.allFinite())
            throw NumericError("model " + name + ": non-finite coefficient output");
    }
};

struct GaussianStats {
    Vector mean;
    Matrix cov;

    /// Symmetric within 1e-12 and eigenvalues >= -1e-12.
    bool is_valid() const
    {
        if (cov.rows() != mean.size() || cov.cols() != mean.size()) return false;
        if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12) return false;
        Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
        return eig.eigenvalues().minCoeff() >= -1e-12;
    }
};

inline SdeModel make_example1()
{
    SdeModel model;
    model.name = "example1";
    model.d = model.m = model.d_mu = 1;
    model.mu_domain = {Vector::Constant(1, -1.0), Vector::Constant(1, 1.0)};
    model.drift_fn = [](std::span<const double>, std::span<const double> mu, std::span<double> out) { out[0] = mu[0]; };
    model.diffusion_fn = [](std::span<const double>, std::span<const double>, std::span<double> out) { out[0] = 1.0; };
    model.benchmark = Benchmark::BrownianDrift;
    return model;
}

inline SdeModel make_example2()
{
    SdeModel model;
    model.name = "example2";
    model.d = model.m = model.d_mu = 1;
    model.mu_domain = {Vector::Constant(1, 0.5), Vector::Constant(1, 2.0)};
    model.drift_fn = [](std::span<const double> x, std::span<const double> mu, std::span<double> out) { out[0] = -mu[0] * x[0]; };
    model.diffusion_fn = [](std::span<const double>, std::span<const double> mu, std::span<double> out) {
        out[0] = std::sqrt(1.0 + mu[0] * mu[0]);
    };
    model.benchmark = Benchmark::ScalarOu;
    return model;
}

inline SdeModel make_example3()
{
    using C = RotatingOuConstants;
    SdeModel model;
    model.name = "example3";
    model.d = model.m = 2;
    model.d_mu = 1;
    model.mu_domain = {Vector::Constant(1, 0.5), Vector::Constant(1, 2.0)};
    // -A x with A = [[mu, -omega], [omega, mu]]
    model.drift_fn = [](std::span<const double> x, std::span<const double> mu, std::span<double> out) {
        out[0] = -(mu[0] * x[0] - C::omega * x[1]);
        out[1] = -(C::omega * x[0] + mu[0] * x[1]);
    };
    model.diffusion_fn = [](std::span<const double>, std::span<const double>, std::span<double> out) {
        out[0] = C::sigma;
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = C::sigma;
    };
    model.benchmark = Benchmark::RotatingOu;
    return model;
}

/// Name -> factory map. The three benchmarks are registered by default;
/// further models are added in code.
class ModelRegistry {
public:
    using Factory = std::function<SdeModel()>;

    ModelRegistry()
    {
        add("example1", make_example1);
        add("example2", make_example2);
        add("example3", make_example3);
    }

    void add(const std::string& name, Factory factory) { factories_[name] = std::move(factory); }

    bool contains(const std::string& name) const { return factories_.count(name) != 0; }

    SdeModel make(const std::string& name) const
    {
        const auto it = factories_.find(name);
        if (it == factories_.end()) throw ValidationError("unknown model '" + name + "'");
        SdeModel model = it->second();
        model.validate();
        return model;
    }

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        for (const auto& [name, _] : factories_) out.push_back(name);
        return out;
    }

private:
    std::map<std::string, Factory> factories_;
};

inline const ModelRegistry& default_registry()
{
    static const ModelRegistry registry;
    return registry;
}

// ---------------------------------------------------------------------------
// Closed-form statistics
// ---------------------------------------------------------------------------

/// e^{-A t} for A = [[mu, -omega], [omega, mu]].
inline Eigen::Matrix2d matrix_exponential_2d(double mu, double omega, double t)
{
    detail::require(t >= 0.0, "matrix_exponential_2d: t must be nonnegative");
    const double decay = std::exp(-mu * t);
    const double c = std::cos(omega * t);
    const double s = std::sin(omega * t);
    Eigen::Matrix2d e;
    e << c, s, -s, c;
    return decay * e;
}

namespace detail {

inline Benchmark oracle_of(const SdeModel& model)
{
    if (!model.benchmark) throw NoOracleError("model " + model.name + " has no analytic oracle");
    return *model.benchmark;
}

inline double positive_rate(const SdeModel& model, const Vector& mu)
{
    detail::require(mu.size() == 1, "model " + model.name + ": expected a scalar parameter");
    detail::require(mu[0] > 0.0, "model " + model.name + ": closed form needs mu > 0");
    return mu[0];
}

// (1 - e^{-2 mu t}) / (2 mu), stable as mu t -> 0.
inline double ou_variance_factor(double mu, double t) { return -std::expm1(-2.0 * mu * t) / (2.0 * mu); }

}  // namespace detail

/// Law of X_{n+1} given X_n = x over one recording step dt.
inline GaussianStats exact_conditional(const SdeModel& model, const Vector& x, const Vector& mu, double dt)
{
    const Benchmark which = detail::oracle_of(model);
    model.check_shapes(x, mu);
    detail::require(dt > 0.0, "exact_conditional: dt must be positive");

    GaussianStats out;
    switch (which) {
    case Benchmark::BrownianDrift:
        out.mean = x + mu * dt;
        out.cov = Matrix::Constant(1, 1, dt);
        break;
    case Benchmark::ScalarOu: {
        const double rate = detail::positive_rate(model, mu);
        out.mean = x * std::exp(-rate * dt);
        out.cov = Matrix::Constant(1, 1, (1.0 + rate * rate) * detail::ou_variance_factor(rate, dt));
        break;
    }
    case Benchmark::RotatingOu: {
        using C = RotatingOuConstants;
        const double rate = detail::positive_rate(model, mu);
        out.mean = matrix_exponential_2d(rate, C::omega, dt) * x;
        out.cov = Matrix::Identity(2, 2) * (C::sigma * C::sigma * detail::ou_variance_factor(rate, dt));
        break;
    }
    }
    return out;
}

/// Law of X_T when X_0 ~ N(m0, s0cov). T = 0 returns the initial law.
inline GaussianStats exact_terminal(const SdeModel& model, const Vector& m0, const Matrix& s0cov, const Vector& mu, double horizon)
{
    const Benchmark which = detail::oracle_of(model);
    model.check_shapes(m0, mu);
    detail::require(s0cov.rows() == m0.size() && s0cov.cols() == m0.size(), "exact_terminal: initial covariance has wrong shape");
    detail::require(horizon >= 0.0, "exact_terminal: horizon must be nonnegative");
    if (horizon == 0.0) return {m0, s0cov};

    GaussianStats out;
    switch (which) {
    case Benchmark::BrownianDrift:
        out.mean = m0 + mu * horizon;
        out.cov = s0cov + Matrix::Identity(1, 1) * horizon;
        break;
    case Benchmark::ScalarOu: {
        const double rate = detail::positive_rate(model, mu);
        const double decay = std::exp(-rate * horizon);
        out.mean = m0 * decay;
        out.cov = s0cov * (decay * decay) + Matrix::Identity(1, 1) * ((1.0 + rate * rate) * detail::ou_variance_factor(rate, horizon));
        break;
    }
    case Benchmark::RotatingOu: {
        using C = RotatingOuConstants;
        const double rate = detail::positive_rate(model, mu);
        const Eigen::Matrix2d e = matrix_exponential_2d(rate, C::omega, horizon);
        out.mean = e * m0;
        out.cov = e * s0cov * e.transpose() + Matrix::Identity(2, 2) * (C::sigma * C::sigma * detail::ou_variance_factor(rate, horizon));
        break;
    }
    }
    return out;
}

/// Covariance of the stationary law. Brownian drift has none.
inline Matrix stationary_variance(const SdeModel& model, const Vector& mu)
{
    const Benchmark which = detail::oracle_of(model);
    switch (which) {
    case Benchmark::BrownianDrift:
        throw NoOracleError("model " + model.name + " has no stationary law");
    case Benchmark::ScalarOu: {
        const double rate = detail::positive_rate(model, mu);
        return Matrix::Constant(1, 1, (1.0 + rate * rate) / (2.0 * rate));
    }
    case Benchmark::RotatingOu: {
        using C = RotatingOuConstants;
        const double rate = detail::positive_rate(model, mu);
        return Matrix::Identity(2, 2) * (C::sigma * C::sigma / (2.0 * rate));
    }
    }
    throw NoOracleError("unreachable");
}

/// One draw from N(mean, cov) through a Cholesky factor (cov may be singular).
inline Vector sample_gaussian(const GaussianStats& law, RandomStream& rng)
{
    const Eigen::Index d = law.mean.size();
    Vector xi(d);
    for (Eigen::Index i = 0; i < d; ++i) xi[i] = rng.normal();
    Eigen::LDLT<Matrix> ldlt(law.cov);
    // L D^{1/2} with the pivoting undone.
    const Vector sqrt_d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
    Matrix l = ldlt.matrixL();
    Vector y = l * sqrt_d.asDiagonal() * xi;
    return law.mean + (ldlt.transpositionsP().transpose() * y);
}

/// Draw from the stationary law N(0, stationary_variance(mu)).
inline Vector sample_stationary(const SdeModel& model, const Vector& mu, RandomStream& rng)
{
    const Matrix cov = stationary_variance(model, mu);
    return sample_gaussian({Vector::Zero(cov.rows()), cov}, rng);
}

}  // namespace pflow
