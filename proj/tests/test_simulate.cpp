#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"

using namespace pflow;
using pflow::testing::file_bytes;
using pflow::testing::scratch_dir;
using pflow::testing::vec;

namespace {

SimulationConfig small_config(std::size_t n_mu, std::size_t n_traj, double horizon)
{
    SimulationConfig cfg;
    cfg.n_mu = n_mu;
    cfg.n_traj = n_traj;
    cfg.horizon = horizon;
    cfg.dt = 0.1;
    cfg.fine_dt = 0.01;
    cfg.seed = RngSeed{42};
    cfg.workers = 1;
    return cfg;
}

}  // namespace

TEST(EulerMaruyama, DeterministicLimitIsExact)
{
    auto model = make_example1();
    model.diffusion_fn = [](std::span<const double>, std::span<const double>, std::span<double> out) { out[0] = 0.0; };
    const auto path = euler_maruyama_path(model, vec({0.25}), vec({0.5}), 1e-3, 100, RngSeed{1});
    ASSERT_EQ(path.size(), 101u);
    for (std::size_t k = 0; k < path.size(); ++k) EXPECT_NEAR(path[k][0], 0.25 + 0.5 * static_cast<double>(k) * 1e-3, 1e-14);
}

TEST(EulerMaruyama, IncrementVariance)
{
    const auto path = euler_maruyama_path(make_example1(), vec({0.0}), vec({0.0}), 1e-3, 100000, RngSeed{9});
    std::vector<double> inc(path.size() - 1);
    for (std::size_t k = 0; k + 1 < path.size(); ++k) inc[k] = path[k + 1][0] - path[k][0];
    EXPECT_NEAR(sample_variance(inc) / 1e-3, 1.0, 0.03);
}

TEST(EulerMaruyama, SeedDeterminism)
{
    const auto a = euler_maruyama_path(make_example2(), vec({1.0}), vec({1.0}), 1e-3, 50, RngSeed{3});
    const auto b = euler_maruyama_path(make_example2(), vec({1.0}), vec({1.0}), 1e-3, 50, RngSeed{3});
    const auto c = euler_maruyama_path(make_example2(), vec({1.0}), vec({1.0}), 1e-3, 50, RngSeed{4});
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k][0], b[k][0]);
    EXPECT_NE(a.back()[0], c.back()[0]);
}

TEST(EulerMaruyama, NonFiniteStateNamesStep)
{
    auto model = make_example1();
    model.drift_fn = [](std::span<const double> x, std::span<const double>, std::span<double> out) { out[0] = x[0] > 1.0 ? INFINITY : 2000.0; };
    model.diffusion_fn = [](std::span<const double>, std::span<const double>, std::span<double> out) { out[0] = 0.0; };
    try {
        euler_maruyama_path(model, vec({0.0}), vec({0.0}), 1e-3, 10, RngSeed{1});
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos) << e.what();
    }
}

TEST(EulerMaruyama, WeakAccuracyOverOneRecordingStep)
{
    // 1e5 trajectories of 100 fine steps against the exact one-step law.
    const auto model = make_example1();
    const double mu = 0.5, x0 = 2.0;
    const std::size_t n = 100000;
    std::vector<double> end(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = substream(RngSeed{77}, StreamTag::Trajectory, {0, i});
        double x[1] = {x0};
        const double m[1] = {mu};
        euler_maruyama_advance(model, x, m, 1e-3, 100, rng);
        end[i] = x[0];
    }
    const auto exact = exact_conditional(model, vec({x0}), vec({mu}), 0.1);
    const double se_mean = std::sqrt(exact.cov(0, 0) / static_cast<double>(n));
    const double se_var = exact.cov(0, 0) * std::sqrt(2.0 / static_cast<double>(n - 1));
    EXPECT_LT(std::abs(sample_mean(end) - exact.mean[0]), 3 * se_mean);
    EXPECT_LT(std::abs(sample_variance(end) - exact.cov(0, 0)), 3 * se_var);
}

TEST(ExactTransition, MomentsMatchOracle)
{
    const auto m3 = make_example3();
    RandomStream rng(21);
    const int n = 100000;
    Vector sum = Vector::Zero(2);
    for (int i = 0; i < n; ++i) sum += exact_gaussian_transition_sample(m3, vec({1.5, 0.5}), vec({1.0}), 0.1, rng);
    const Vector expect = exact_conditional(m3, vec({1.5, 0.5}), vec({1.0}), 0.1).mean;
    EXPECT_LT((sum / n - expect).cwiseAbs().maxCoeff(), 0.01);

    const auto m1 = make_example1();
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += exact_gaussian_transition_sample(m1, vec({1.0}), vec({0.5}), 0.1, rng)[0];
    EXPECT_NEAR(s / n, 1.05, 0.005);
}

TEST(ExactTransition, TinyStepStaysPut)
{
    const auto out = exact_gaussian_transition_sample(make_example2(), vec({0.7}), vec({1.0}), 1e-14, RngSeed{5});
    EXPECT_NEAR(out[0], 0.7, 1e-6);
}

TEST(ExactTransition, CustomModelHasNoOracle)
{
    auto m = make_example1();
    m.benchmark.reset();
    EXPECT_THROW(exact_gaussian_transition_sample(m, vec({0.0}), vec({0.0}), 0.1, RngSeed{1}), NoOracleError);
}

TEST(SimulateDataset, RecordCount)
{
    auto cfg = small_config(3, 4, 0.5);
    const auto ds = simulate_dataset(make_example1(), cfg);
    EXPECT_EQ(ds.size(), 3u * 4u * 5u);
    EXPECT_EQ(ds.n_steps, 5u);
    EXPECT_EQ(ds.n_traj, 4u);
    ASSERT_EQ(ds.mu_grid.size(), 3u);
    EXPECT_DOUBLE_EQ(ds.mu_grid[0][0], -1.0);
    EXPECT_DOUBLE_EQ(ds.mu_grid[1][0], 0.0);
    EXPECT_DOUBLE_EQ(ds.mu_grid[2][0], 1.0);

    auto one = small_config(1, 1, 0.1);
    EXPECT_EQ(simulate_dataset(make_example1(), one).size(), 1u);
}

TEST(SimulateDataset, PaperScaleCounts)
{
    // J = N_s * N_mu * T / dt without simulating.
    SimulationConfig c1;
    const std::size_t j1 = c1.n_traj * c1.n_mu * detail::integral_ratio(c1.horizon, c1.dt, "T/dt");
    EXPECT_EQ(j1, 1050000u);
    const std::size_t j3 = 3000u * 16u * detail::integral_ratio(2.0, 0.1, "T/dt");
    EXPECT_EQ(j3, 960000u);
}

TEST(SimulateDataset, ConsecutivePairsAndGridMembership)
{
    const auto ds = simulate_dataset(make_example2(), [] {
        auto c = small_config(4, 3, 0.4);
        c.init = InitialLaw::stationary();
        return c;
    }());
    for (std::size_t j = 0; j < ds.size(); ++j) {
        const auto r = ds.record(j);
        bool on_grid = false;
        for (const auto& mu : ds.mu_grid) on_grid |= mu[0] == r.mu[0];
        EXPECT_TRUE(on_grid);
        if (j % ds.n_steps != 0) {
            EXPECT_EQ(r.x_n[0], ds.record(j - 1).x_np1[0]);
        }
    }
}

TEST(SimulateDataset, NonIntegralStepRejected)
{
    auto cfg = small_config(2, 2, 1.0);
    cfg.fine_dt = 0.03;
    EXPECT_THROW(simulate_dataset(make_example1(), cfg), ValidationError);
    cfg = small_config(2, 2, 0.95);
    EXPECT_THROW(simulate_dataset(make_example1(), cfg), ValidationError);
}

TEST(SimulateDataset, WorkerCountDoesNotChangeOutput)
{
    auto cfg = small_config(3, 5, 0.3);
    const auto a = simulate_dataset(make_example1(), cfg);
    cfg.workers = 3;
    const auto b = simulate_dataset(make_example1(), cfg);
    EXPECT_EQ(a.raw(), b.raw());
}

TEST(SimulateDataset, ExactStepperForExample3)
{
    auto cfg = small_config(2, 3, 0.2);
    cfg.stepper = Stepper::ExactGaussian;
    cfg.init = InitialLaw::uniform(vec({-2.0, -2.0}), vec({2.0, 2.0}));
    const auto ds = simulate_dataset(make_example3(), cfg);
    EXPECT_EQ(ds.size(), 2u * 3u * 2u);
    EXPECT_EQ(ds.d(), 2u);
}

TEST(SimulateDataset, StationaryInitialVariance)
{
    // Initial states of Example 2 against the stationary variance, per mu.
    const auto model = make_example2();
    auto cfg = small_config(3, 20000, 0.1);
    cfg.init = InitialLaw::stationary();
    const auto ds = simulate_dataset(model, cfg);
    for (std::size_t k = 0; k < ds.mu_grid.size(); ++k) {
        std::vector<double> x0(cfg.n_traj);
        for (std::size_t i = 0; i < cfg.n_traj; ++i) x0[i] = ds.record(k * cfg.n_traj + i).x_n[0];
        const double v = stationary_variance(model, ds.mu_grid[k])(0, 0);
        const double se = v * std::sqrt(2.0 / static_cast<double>(cfg.n_traj - 1));
        EXPECT_LT(std::abs(sample_variance(x0) - v), 3 * se) << "mu=" << ds.mu_grid[k][0];
    }
}

TEST(DatasetIo, RoundTripIsBitExact)
{
    const auto dir = scratch_dir("dataset_io");
    const auto ds = simulate_dataset(make_example1(), small_config(2, 3, 0.3));
    save_dataset(ds, dir / "d.pfds");
    const auto back = load_dataset(dir / "d.pfds");
    EXPECT_EQ(back.raw(), ds.raw());
    EXPECT_EQ(back.d(), ds.d());
    EXPECT_EQ(back.d_mu(), ds.d_mu());
    EXPECT_EQ(back.dt, ds.dt);
    EXPECT_EQ(back.model_name, "example1");
    EXPECT_EQ(back.n_traj, 3u);
    EXPECT_EQ(back.n_steps, 3u);
    ASSERT_EQ(back.mu_grid.size(), 2u);
    EXPECT_EQ(back.mu_grid[1][0], ds.mu_grid[1][0]);
}

TEST(DatasetIo, HeaderLayout)
{
    const auto ds = simulate_dataset(make_example1(), small_config(1, 1, 0.1));
    const auto bytes = encode_dataset(ds).bytes();
    ASSERT_GE(bytes.size(), 4u + 2 + 24 + 3 * 8);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PFDS");
    EXPECT_EQ(bytes[4], 1);
    EXPECT_EQ(bytes[5], 0);
    EXPECT_EQ(bytes[6], 1);   // d
    EXPECT_EQ(bytes[14], 1);  // d_mu
    EXPECT_EQ(bytes[22], 1);  // J
    double first = 0.0;
    std::memcpy(&first, bytes.data() + 30, 8);
    EXPECT_EQ(first, ds.raw()[0]);
}

TEST(DatasetIo, MalformedFilesRejected)
{
    const auto dir = scratch_dir("dataset_bad");
    { std::ofstream(dir / "empty.pfds", std::ios::binary); }
    EXPECT_THROW(load_dataset(dir / "empty.pfds"), FormatError);

    const auto ds = simulate_dataset(make_example1(), small_config(2, 2, 0.2));
    auto bytes = encode_dataset(ds).bytes();
    {
        std::ofstream out(dir / "trunc.pfds", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    EXPECT_THROW(load_dataset(dir / "trunc.pfds"), FormatError);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    {
        std::ofstream out(dir / "magic.pfds", std::ios::binary);
        out.write(bad_magic.data(), static_cast<std::streamsize>(bad_magic.size()));
    }
    EXPECT_THROW(load_dataset(dir / "magic.pfds"), FormatError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    {
        std::ofstream out(dir / "version.pfds", std::ios::binary);
        out.write(bad_version.data(), static_cast<std::streamsize>(bad_version.size()));
    }
    EXPECT_THROW(load_dataset(dir / "version.pfds"), FormatError);
}

TEST(DatasetIo, CsvExport)
{
    const auto dir = scratch_dir("dataset_csv");
    const auto ds = simulate_dataset(make_example3(), [] {
        auto c = small_config(1, 1, 0.1);
        c.stepper = Stepper::ExactGaussian;
        c.init = InitialLaw::point(vec({1.0, 0.0}));
        return c;
    }());
    export_dataset_csv(ds, dir / "d.csv");
    std::ifstream in(dir / "d.csv");
    std::string header, row, extra;
    std::getline(in, header);
    std::getline(in, row);
    EXPECT_FALSE(static_cast<bool>(std::getline(in, extra)));
    EXPECT_EQ(header, "x_n[0],x_n[1],mu[0],x_np1[0],x_np1[1]");
    EXPECT_EQ(row.substr(0, 4), "1,0,");
}

TEST(DatasetIo, SameSeedSameFile)
{
    const auto dir = scratch_dir("dataset_det");
    auto cfg = small_config(2, 3, 0.3);
    save_dataset(simulate_dataset(make_example1(), cfg), dir / "a.pfds");
    save_dataset(simulate_dataset(make_example1(), cfg), dir / "b.pfds");
    cfg.seed = RngSeed{43};
    save_dataset(simulate_dataset(make_example1(), cfg), dir / "c.pfds");
    EXPECT_EQ(file_bytes(dir / "a.pfds"), file_bytes(dir / "b.pfds"));
    EXPECT_NE(file_bytes(dir / "a.pfds"), file_bytes(dir / "c.pfds"));
}
