#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"

using namespace pflow;
using pflow::testing::file_bytes;
using pflow::testing::scratch_dir;
using pflow::testing::vec;

namespace {

FlowMapNet null_net(const SdeModel& model)
{
    auto net = FlowMapNet::zeros(model.d, model.d_mu, {8}, 3.0);
    net.model_name = model.name;
    net.dt = 0.1;
    return net;
}

FlowMapNet random_net(const SdeModel& model, std::uint64_t seed)
{
    auto net = FlowMapNet::glorot(model.d, model.d_mu, {16, 16}, 3.0, RngSeed{seed});
    net.model_name = model.name;
    net.dt = 0.1;
    return net;
}

std::vector<Vector> mu_values(std::initializer_list<double> v)
{
    std::vector<Vector> out;
    for (const double m : v) out.push_back(vec({m}));
    return out;
}

std::size_t line_count(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) ++n;
    return n;
}

}  // namespace

TEST(Kde, StandardNormalConsistency)
{
    RandomStream rng(1);
    std::vector<double> s(100000);
    for (auto& v : s) v = rng.normal();
    const auto grid = linspace(-3.0, 3.0, 121);
    const auto curve = kde_1d(s, grid);
    double worst = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) worst = std::max(worst, std::abs(curve.density[i] - normal_pdf(grid[i], 0.0, 1.0)));
    EXPECT_LT(worst, 0.02);
    EXPECT_NEAR(curve.bandwidth, 1.06 * std::sqrt(sample_variance(s)) * std::pow(1e5, -0.2), 1e-12);
}

TEST(Kde, RepeatedValueGivesGaussianBump)
{
    const std::vector<double> s(40, 1.5);
    const auto grid = linspace(0.0, 3.0, 31);
    const auto curve = kde_1d(s, grid, 0.3);
    for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(curve.density[i], normal_pdf(grid[i], 1.5, 0.09), 1e-14);
    EXPECT_THROW(kde_1d(s, grid), ValidationError);
}

TEST(Kde, UnitMassNonnegativeAndSymmetric)
{
    RandomStream rng(2);
    std::vector<double> s;
    for (int i = 0; i < 2000; ++i) {
        const double v = rng.uniform(0.0, 2.0) * rng.normal();
        s.push_back(v);
        s.push_back(-v);
    }
    const auto grid = linspace(-8.0, 8.0, 801);
    const auto curve = kde_1d(s, grid);
    EXPECT_NEAR(curve.mass(), 1.0, 0.02);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_GE(curve.density[i], 0.0);
        EXPECT_NEAR(curve.density[i], curve.density[grid.size() - 1 - i], 1e-12);
    }
}

TEST(ConditionalSweep, Example1ExactColumn)
{
    const auto model = make_example1();
    const auto grid = uniform_mu_grid(model.mu_domain, 21);
    const auto report = conditional_moment_sweep(null_net(model), model, vec({2.0}), grid, 10, RngSeed{1});
    ASSERT_EQ(report.rows.size(), 21u);
    for (const auto& row : report.rows) {
        EXPECT_DOUBLE_EQ(row.exact_mean[0], 2.0 + 0.1 * row.mu[0]);
        EXPECT_DOUBLE_EQ(row.exact_var[0], 0.1);
        // The null net keeps every draw at x.
        EXPECT_EQ(row.learned_mean[0], 2.0);
        EXPECT_EQ(row.learned_var[0], 0.0);
        EXPECT_NEAR(row.mean_abs_error, std::abs(0.1 * row.mu[0]), 1e-15);
        EXPECT_DOUBLE_EQ(row.var_rel_error, 1.0);
    }
}

TEST(ConditionalSweep, Example2ExactMean)
{
    const auto model = make_example2();
    const auto grid = uniform_mu_grid(model.mu_domain, 16);
    const auto cols = exact_conditional_column(model, vec({1.0}), grid, 0.1);
    for (std::size_t k = 0; k < grid.size(); ++k) EXPECT_NEAR(cols[k].mean[0], std::exp(-0.1 * grid[k][0]), 1e-14);
}

TEST(ConditionalSweep, GuardsAndReproducibility)
{
    const auto model = make_example1();
    const auto net = random_net(model, 3);
    EXPECT_THROW(conditional_moment_sweep(net, model, vec({2.0}), mu_values({0.5}), 0, RngSeed{1}), ValidationError);
    EXPECT_THROW(conditional_moment_sweep(random_net(make_example3(), 3), model, vec({2.0}), mu_values({0.5}), 10, RngSeed{1}), ValidationError);
    const auto a = conditional_moment_sweep(net, model, vec({2.0}), mu_values({-0.5, 0.5}), 500, RngSeed{4}, 1);
    const auto b = conditional_moment_sweep(net, model, vec({2.0}), mu_values({-0.5, 0.5}), 500, RngSeed{4}, 3);
    for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(a.rows[k].learned_mean, b.rows[k].learned_mean);
        EXPECT_EQ(a.rows[k].learned_var, b.rows[k].learned_var);
    }
}

TEST(ConditionalSweep, TwoDimensionalMoments)
{
    const auto model = make_example3();
    const auto report = conditional_moment_sweep(null_net(model), model, vec({1.5, 0.5}), mu_values({0.5, 1.0, 2.0}), 4, RngSeed{2});
    for (const auto& row : report.rows) {
        const auto law = exact_conditional(model, vec({1.5, 0.5}), row.mu, 0.1);
        EXPECT_EQ(row.exact_mean, law.mean);
        EXPECT_EQ(row.exact_var, law.cov.diagonal());
        EXPECT_DOUBLE_EQ(row.cov_abs_error, law.cov.cwiseAbs().maxCoeff());
    }
}

TEST(Heatmap, ExactColumnsShapeAndMass)
{
    const auto model = make_example1();
    const auto mu_grid = uniform_mu_grid(model.mu_domain, 11);
    const auto values = linspace(-2.0, 2.0, 201);
    const auto net = random_net(model, 5);
    const auto h = heatmap_grid(net, model, vec({0.0}), mu_grid, values, 4000, RngSeed{6});
    ASSERT_EQ(h.learned.rows(), 201);
    ASSERT_EQ(h.learned.cols(), 11);
    EXPECT_EQ(h.exact.rows(), h.learned.rows());
    EXPECT_EQ(h.exact.cols(), h.learned.cols());
    const auto zero = static_cast<Eigen::Index>(5);
    ASSERT_DOUBLE_EQ(mu_grid[5][0], 0.0);
    for (std::size_t v = 0; v < values.size(); ++v)
        EXPECT_NEAR(h.exact(static_cast<Eigen::Index>(v), zero), normal_pdf(values[v], 0.0, 0.1), 1e-14);
    for (Eigen::Index k = 0; k < h.exact.cols(); ++k) {
        DensityCurve exact{values, {}, 0.0}, learned{values, {}, 0.0};
        for (Eigen::Index v = 0; v < h.exact.rows(); ++v) {
            exact.density.push_back(h.exact(v, k));
            learned.density.push_back(h.learned(v, k));
        }
        EXPECT_NEAR(exact.mass(), 1.0, 0.02) << "column " << k;
    }
}

TEST(Heatmap, LearnedColumnIsKdeOfDraws)
{
    const auto model = make_example1();
    const auto net = random_net(model, 7);
    const auto values = linspace(-1.0, 3.0, 41);
    const auto h = heatmap_grid(net, model, vec({1.0}), mu_values({0.3}), values, 300, RngSeed{8});
    const Matrix draws = sample_many(net, vec({1.0}), vec({0.3}), 300, RngSeed{8});
    const auto curve = kde_1d(detail::row_of(draws, 0), values);
    for (std::size_t v = 0; v < values.size(); ++v) EXPECT_EQ(h.learned(static_cast<Eigen::Index>(v), 0), curve.density[v]);
    EXPECT_EQ(h.bandwidths[0], curve.bandwidth);
}

TEST(Terminal, NullNetKeepsInitialLaw)
{
    const auto model = make_example1();
    const GaussianStats initial{vec({0.0}), Matrix::Constant(1, 1, 0.25)};
    const auto r = terminal_distribution(null_net(model), model, initial, vec({-0.5}), 10, 20000, RngSeed{9});
    EXPECT_NEAR(r.exact_mean[0], -0.5, 1e-12);
    EXPECT_NEAR(r.exact_std[0], std::sqrt(1.25), 1e-12);
    EXPECT_NEAR(r.learned_mean[0], 0.0, 4 * 0.5 / std::sqrt(20000.0));
    EXPECT_NEAR(r.learned_std[0], 0.5, 0.02);
}

TEST(VarianceEvolution, StepZeroAndLongTimeOracles)
{
    const auto ex3 = make_example3();
    const auto v3 = variance_evolution(null_net(ex3), ex3, vec({1.0, 0.0}), vec({1.0}), 100, 2, RngSeed{1});
    ASSERT_EQ(v3.steps.size(), 101u);
    EXPECT_EQ(v3.steps[0].exact_var, Vector::Zero(2));
    EXPECT_EQ(v3.steps[0].learned_var, Vector::Zero(2));
    EXPECT_NEAR(v3.steps.back().exact_var[0], 0.125, 1e-8);
    EXPECT_NEAR(v3.steps.back().exact_var[1], 0.125, 1e-8);

    const auto ex2 = make_example2();
    const auto v2 = variance_evolution(null_net(ex2), ex2, vec({0.0}), vec({1.0}), 100, 2, RngSeed{1});
    EXPECT_NEAR(v2.steps.back().exact_var[0], 1.0, 1e-8);
    EXPECT_DOUBLE_EQ(v2.final_rel_error(), 1.0);
    EXPECT_THROW(v2.rel_error_at(0), ValidationError);
}

TEST(OraclePurity, ExactColumnsIgnoreTheNetwork)
{
    const auto model = make_example2();
    const auto grid = uniform_mu_grid(model.mu_domain, 7);
    const auto values = linspace(-2.0, 3.0, 26);
    const auto a = conditional_moment_sweep(null_net(model), model, vec({1.0}), grid, 50, RngSeed{1});
    const auto b = conditional_moment_sweep(random_net(model, 2), model, vec({1.0}), grid, 50, RngSeed{3});
    for (std::size_t k = 0; k < grid.size(); ++k) {
        EXPECT_EQ(a.rows[k].exact_mean, b.rows[k].exact_mean);
        EXPECT_EQ(a.rows[k].exact_var, b.rows[k].exact_var);
    }
    const auto ha = heatmap_grid(random_net(model, 7), model, vec({1.0}), grid, values, 50, RngSeed{1});
    const auto hb = heatmap_grid(random_net(model, 4), model, vec({1.0}), grid, values, 50, RngSeed{5});
    EXPECT_EQ(ha.exact, hb.exact);
    const GaussianStats initial{vec({0.5}), Matrix::Constant(1, 1, 0.1)};
    EXPECT_EQ(terminal_distribution(null_net(model), model, initial, vec({1.0}), 5, 10, RngSeed{1}).exact_std,
              terminal_distribution(random_net(model, 6), model, initial, vec({1.0}), 5, 10, RngSeed{2}).exact_std);
}

TEST(EmitReport, RowCountsBytesAndSummary)
{
    const auto model = make_example1();
    const auto net = random_net(model, 11);
    EvalReports r;
    r.conditional.push_back(conditional_moment_sweep(net, model, vec({2.0}), uniform_mu_grid(model.mu_domain, 5), 100, RngSeed{1}));
    r.heatmaps.push_back(heatmap_grid(net, model, vec({0.0}), uniform_mu_grid(model.mu_domain, 3), linspace(-1, 1, 7), 100, RngSeed{2}));
    const GaussianStats initial{vec({0.0}), Matrix::Constant(1, 1, 0.25)};
    r.terminal.push_back(terminal_distribution(net, model, initial, vec({0.5}), 10, 100, RngSeed{3}));
    r.terminal.push_back(terminal_distribution(net, model, initial, vec({-0.5}), 10, 100, RngSeed{3}));
    r.variance.push_back(variance_evolution(net, model, vec({0.0}), vec({0.5}), 6, 50, RngSeed{4}));

    const auto a = scratch_dir("emit_a"), b = scratch_dir("emit_b");
    emit_report(r, a);
    emit_report(r, b);
    EXPECT_EQ(line_count(a / "conditional.csv"), 1u + 5);
    EXPECT_EQ(line_count(a / "heatmap.csv"), 1u + 3 * 7);
    EXPECT_EQ(line_count(a / "terminal.csv"), 1u + 2);
    EXPECT_EQ(line_count(a / "variance.csv"), 1u + 7);
    for (const char* f : {"conditional.csv", "heatmap.csv", "terminal.csv", "variance.csv", "plot_data.csv", "summary.json"})
        EXPECT_EQ(file_bytes(a / f), file_bytes(b / f)) << f;

    std::ifstream in(a / "summary.json");
    const auto summary = nlohmann::json::parse(in);
    ASSERT_TRUE(summary.contains("max_abs_mean_error"));
    EXPECT_DOUBLE_EQ(summary["max_abs_mean_error"].get<double>(), r.conditional[0].max_mean_abs_error());
    EXPECT_DOUBLE_EQ(summary["max_terminal_mean_error"].get<double>(), std::max(r.terminal[0].mean_abs_error, r.terminal[1].mean_abs_error));
}
