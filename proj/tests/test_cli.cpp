#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "support.hpp"

using namespace pflow;
using nlohmann::json;
using pflow::testing::file_bytes;
using pflow::testing::scratch_dir;

namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(PFLOW_SOURCE_DIR) / "configs";

json read_json(const fs::path& p)
{
    std::ifstream in(p);
    return json::parse(in);
}

void write_json(const fs::path& p, const json& j)
{
    std::ofstream out(p);
    out << j.dump(2);
}

/// Runs the CLI with the given arguments; stdout and stderr go to files in dir.
int run_cli(const std::string& args, const fs::path& dir)
{
    const std::string cmd = std::string("\"") + PFLOW_CLI_PATH + "\" " + args + " > \"" + (dir / "stdout.txt").string() + "\" 2> \"" +
                            (dir / "stderr.txt").string() + "\"";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_text(const fs::path& p)
{
    const auto b = file_bytes(p);
    return {b.begin(), b.end()};
}

/// Example 1 pipeline small enough to run in well under a second.
json tiny_config()
{
    return json::parse(R"({
      "model": "example1",
      "simulation": {"n_mu": 5, "n_traj": 20, "horizon": 1.0, "dt": 0.1, "fine_dt": 0.01,
                     "init": {"kind": "uniform", "lower": [-5.0], "upper": [5.0]}, "seed": 1},
      "score": {"n_neighbors": 50, "nu_x": 1.0, "nu_mu": 0.5, "n_tau": 20, "n_samples": 200, "seed": 2},
      "train": {"hidden": [8], "learning_rate": 0.001, "batch_size": 32, "patience": 5, "max_epochs": 5, "c_scale": 3.0, "seed": 3},
      "eval": {"n_samples": 200, "seed": 4,
               "conditional": [{"x": [2.0], "n_mu": 5}],
               "heatmaps": [{"x": [0.0], "n_mu": 3, "lower": -1.0, "upper": 1.0, "n_values": 9}],
               "terminal": [{"mean": [0.0], "cov": [[0.25]], "mu": [[-0.5], [0.5]], "n_steps": 3, "n_traj": 100}],
               "variance": [{"x0": [0.0], "mu": [[0.5]], "n_steps": 3, "n_traj": 100}]}
    })");
}

std::string validation_message(const json& doc)
{
    try {
        validate_run_config(parse_run_config(doc));
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(RunConfig, PresetsParseAndValidate)
{
    for (const char* name : {"example1", "example2", "example3", "example1-scaled", "example2-scaled", "example3-scaled"}) {
        const auto cfg = load_run_config(kConfigs / (std::string(name) + ".json"));
        EXPECT_NO_THROW(validate_run_config(cfg)) << name;
    }
}

TEST(RunConfig, PresetHyperparameters)
{
    const auto ex1 = load_run_config(kConfigs / "example1.json");
    const auto m1 = resolve_model(ex1);
    const auto sim = simulation_config(ex1, m1);
    EXPECT_EQ(sim.n_mu * sim.n_traj * 10, 1050000u);
    const auto ode1 = ode_config(ex1);
    EXPECT_EQ(ode1.n_samples, 50000u);
    EXPECT_EQ(ode1.score.n_neighbors, 2000u);
    EXPECT_EQ(ode1.n_tau, 1000u);
    EXPECT_EQ(ex1.train.hidden, (std::vector<std::size_t>{128, 128, 128}));
    EXPECT_EQ(ex1.train.c_scale, 3.0);

    const auto ex2 = load_run_config(kConfigs / "example2.json");
    const auto ode2 = ode_config(ex2);
    EXPECT_EQ(ode2.score.n_neighbors, 1000u);
    EXPECT_EQ(ode2.n_tau, 500u);
    EXPECT_EQ(ode2.score.nu_mu, 0.3);

    const auto ex3 = load_run_config(kConfigs / "example3.json");
    EXPECT_EQ(ex3.train.hidden, (std::vector<std::size_t>{256, 256, 256, 256}));

    for (const char* name : {"example1-scaled", "example2-scaled", "example3-scaled"}) {
        const auto s = load_run_config(kConfigs / (std::string(name) + ".json"));
        EXPECT_EQ(s.simulation.n_traj, 1000u) << name;
        EXPECT_EQ(s.score.n_samples, 5000u) << name;
        EXPECT_EQ(s.score.n_neighbors, 500u) << name;
        EXPECT_EQ(s.score.n_tau, 200u) << name;
    }
}

TEST(RunConfig, UnknownKeysAreErrors)
{
    auto doc = tiny_config();
    doc["score"]["n_neighbours"] = 10;
    try {
        parse_run_config(doc);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("n_neighbours"), std::string::npos) << e.what();
    }
    doc = tiny_config();
    doc["extra"] = 1;
    EXPECT_THROW(parse_run_config(doc), ValidationError);
}

TEST(RunConfig, ValidationNamesTheField)
{
    struct Case {
        const char* block;
        const char* key;
        json value;
        const char* expect;
    };
    const Case cases[] = {
        {"simulation", "n_traj", 0, "simulation.n_traj"},
        {"simulation", "stepper", "rk4", "simulation.stepper"},
        {"simulation", "fine_dt", 0.03, "simulation.fine_dt"},
        {"score", "n_tau", 1, "n_tau"},
        {"score", "sampling", "sobol", "score.sampling"},
        {"train", "c_scale", -1.0, "train.c_scale"},
        {"train", "val_fraction", 1.5, "val_fraction"},
        {"eval", "n_samples", 1, "eval.n_samples"},
    };
    for (const auto& c : cases) {
        auto doc = tiny_config();
        doc[c.block][c.key] = c.value;
        const auto msg = validation_message(doc);
        EXPECT_NE(msg.find(c.expect), std::string::npos) << c.block << "." << c.key << ": '" << msg << "'";
    }
    auto doc = tiny_config();
    doc["simulation"]["n_traj"] = "many";
    EXPECT_NE(validation_message(doc).find("simulation.n_traj"), std::string::npos) << validation_message(doc);
    doc = tiny_config();
    doc["eval"]["conditional"][0]["x"] = json::array({1.0, 2.0});
    EXPECT_NE(validation_message(doc).find("eval.conditional.x"), std::string::npos) << validation_message(doc);
    doc = tiny_config();
    doc["model"] = "example9";
    EXPECT_FALSE(validation_message(doc).empty());
}

TEST(Cli, Example1DefaultRecordCount)
{
    const auto dir = scratch_dir("cli_ex1");
    ASSERT_EQ(run_cli("simulate --config \"" + (kConfigs / "example1.json").string() + "\" --out \"" + (dir / "d.pfds").string() + "\"", dir), 0)
        << read_text(dir / "stderr.txt");
    const auto manifest = read_json(dir / "d.pfds.manifest.json");
    EXPECT_EQ(manifest["J"].get<std::size_t>(), 1050000u);
    EXPECT_EQ(load_dataset(dir / "d.pfds").size(), 1050000u);
}

TEST(Cli, UsageAndValidationExitCodes)
{
    const auto dir = scratch_dir("cli_usage");
    const auto out = (dir / "d.pfds").string();
    EXPECT_EQ(run_cli("simulate --config \"" + (dir / "missing.json").string() + "\" --out \"" + out + "\"", dir), 2);
    EXPECT_EQ(run_cli("simulate --out \"" + out + "\"", dir), 2);
    EXPECT_EQ(run_cli("frobnicate", dir), 2);
    EXPECT_EQ(run_cli("", dir), 2);

    auto doc = tiny_config();
    doc["simulation"]["colour"] = "red";
    write_json(dir / "bad.json", doc);
    EXPECT_EQ(run_cli("simulate --config \"" + (dir / "bad.json").string() + "\" --out \"" + out + "\"", dir), 2);
    EXPECT_NE(read_text(dir / "stderr.txt").find("colour"), std::string::npos);
    EXPECT_FALSE(fs::exists(out));

    // A bad train block stops even the simulate stage.
    doc = tiny_config();
    doc["train"]["patience"] = 0;
    write_json(dir / "bad2.json", doc);
    EXPECT_EQ(run_cli("simulate --config \"" + (dir / "bad2.json").string() + "\" --out \"" + out + "\"", dir), 2);
    EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, TinyPipelineIsIdempotent)
{
    const auto dir = scratch_dir("cli_pipeline");
    write_json(dir / "c.json", tiny_config());
    const std::string cfg = "--config \"" + (dir / "c.json").string() + "\"";
    auto p = [&](const char* name) { return "\"" + (dir / name).string() + "\""; };

    for (const char* round : {"1", "2"}) {
        const std::string r(round);
        ASSERT_EQ(run_cli("simulate " + cfg + " --out " + p(("d" + r + ".pfds").c_str()), dir), 0) << read_text(dir / "stderr.txt");
        ASSERT_EQ(run_cli("labels " + cfg + " --data " + p("d1.pfds") + " --out " + p(("l" + r + ".pflb").c_str()), dir), 0)
            << read_text(dir / "stderr.txt");
        ASSERT_EQ(run_cli("train " + cfg + " --labels " + p("l1.pflb") + " --out " + p(("n" + r + ".pfnn").c_str()), dir), 0)
            << read_text(dir / "stderr.txt");
        ASSERT_EQ(run_cli("sample " + cfg + " --checkpoint " + p("n1.pfnn") + " --x 2 --mu 0.5 --n 50 --out " + p(("s" + r + ".csv").c_str()), dir), 0)
            << read_text(dir / "stderr.txt");
        ASSERT_EQ(run_cli("rollout " + cfg + " --checkpoint " + p("n1.pfnn") + " --x0 0 --mu -0.5 --n 40 --steps 3 --out " +
                              p(("r" + r + ".csv").c_str()),
                          dir),
                  0)
            << read_text(dir / "stderr.txt");
        ASSERT_EQ(run_cli("evaluate " + cfg + " --checkpoint " + p("n1.pfnn") + " --out " + p(("e" + r).c_str()), dir), 0)
            << read_text(dir / "stderr.txt");
    }
    for (const char* a : {"d", "l", "n"}) {
        const std::string ext = a == std::string("d") ? ".pfds" : a == std::string("l") ? ".pflb" : ".pfnn";
        EXPECT_EQ(file_bytes(dir / (a + std::string("1") + ext)), file_bytes(dir / (a + std::string("2") + ext))) << a;
    }
    EXPECT_EQ(file_bytes(dir / "s1.csv"), file_bytes(dir / "s2.csv"));
    EXPECT_EQ(file_bytes(dir / "r1.csv"), file_bytes(dir / "r2.csv"));
    for (const char* f : {"conditional.csv", "heatmap.csv", "terminal.csv", "variance.csv", "summary.json", "plot_data.csv"}) {
        ASSERT_TRUE(fs::exists(dir / "e1" / f)) << f;
        EXPECT_EQ(file_bytes(dir / "e1" / f), file_bytes(dir / "e2" / f)) << f;
    }

    // Artifacts and manifests.
    EXPECT_EQ(load_dataset(dir / "d1.pfds").size(), 5u * 20 * 10);
    EXPECT_EQ(load_labels(dir / "l1.pflb").size(), 200u);
    const auto ckpt = file_bytes(dir / "n1.pfnn");
    EXPECT_EQ(std::string(ckpt.begin(), ckpt.begin() + 4), "PFNN");
    const auto lm = read_json(dir / "l1.pflb.manifest.json");
    for (const char* k : {"N", "nu_x", "nu_mu", "delta", "n_tau", "M"}) EXPECT_TRUE(lm.contains(k)) << k;
    const auto tm = read_json(dir / "n1.pfnn.manifest.json");
    for (const char* k : {"hidden", "learning_rate", "batch_size", "patience", "val_fraction", "c_scale", "seed", "best_epoch", "early_stopped"})
        EXPECT_TRUE(tm.contains(k)) << k;
    std::ifstream log(dir / "n1.pfnn.log.csv");
    std::string line;
    std::getline(log, line);
    EXPECT_EQ(line, "epoch,train_loss,val_loss,best_val_loss");
    std::size_t epochs = 0;
    while (std::getline(log, line)) ++epochs;
    EXPECT_EQ(epochs, tm["epochs_run"].get<std::size_t>());
    EXPECT_TRUE(fs::exists(dir / "e1" / "report.manifest.json"));
    EXPECT_NE(read_text(dir / "stdout.txt").find("max_abs_mean_error"), std::string::npos);
    std::ifstream samples(dir / "s1.csv");
    std::size_t rows = 0;
    while (std::getline(samples, line)) ++rows;
    EXPECT_EQ(rows, 51u);

    // Seed override changes the dataset.
    ASSERT_EQ(run_cli("simulate " + cfg + " --seed 77 --out " + p("d3.pfds"), dir), 0);
    EXPECT_NE(file_bytes(dir / "d1.pfds"), file_bytes(dir / "d3.pfds"));
    EXPECT_EQ(read_json(dir / "d3.pfds.manifest.json")["seed"].get<std::uint64_t>(), 77u);

    // Worker count does not change outputs.
    ASSERT_EQ(run_cli("labels " + cfg + " --workers 3 --data " + p("d1.pfds") + " --out " + p("l3.pflb"), dir), 0);
    EXPECT_EQ(file_bytes(dir / "l1.pflb"), file_bytes(dir / "l3.pflb"));

    // Threshold violation gives exit code 4.
    auto strict = tiny_config();
    strict["eval"]["thresholds"] = {{"max_abs_mean_error", 1e-12}};
    write_json(dir / "strict.json", strict);
    EXPECT_EQ(run_cli("evaluate --config " + p("strict.json") + " --checkpoint " + p("n1.pfnn") + " --out " + p("e3"), dir), 4);
    EXPECT_NE(read_text(dir / "stderr.txt").find("max_abs_mean_error"), std::string::npos);

    // Mismatched dimensions are rejected.
    auto ex3 = tiny_config();
    ex3["model"] = "example3";
    ex3["simulation"]["init"] = {{"kind", "uniform"}, {"lower", {-2.0, -2.0}}, {"upper", {2.0, 2.0}}};
    ex3["eval"] = {{"n_samples", 10}};
    write_json(dir / "ex3.json", ex3);
    EXPECT_EQ(run_cli("labels --config " + p("ex3.json") + " --data " + p("d1.pfds") + " --out " + p("l4.pflb"), dir), 2);
    EXPECT_EQ(run_cli("evaluate --config " + p("ex3.json") + " --checkpoint " + p("n1.pfnn") + " --out " + p("e4"), dir), 2);
    EXPECT_EQ(run_cli("train " + cfg + " --labels " + p("d1.pfds") + " --out " + p("n4.pfnn"), dir), 2);
}

TEST(Cli, DivergentTrainingExitsNumeric)
{
    const auto dir = scratch_dir("cli_numeric");
    auto doc = tiny_config();
    doc["train"]["learning_rate"] = 1e308;
    write_json(dir / "c.json", doc);
    const std::string cfg = "--config \"" + (dir / "c.json").string() + "\"";
    ASSERT_EQ(run_cli("simulate " + cfg + " --out \"" + (dir / "d.pfds").string() + "\"", dir), 0);
    ASSERT_EQ(run_cli("labels " + cfg + " --data \"" + (dir / "d.pfds").string() + "\" --out \"" + (dir / "l.pflb").string() + "\"", dir), 0);
    EXPECT_EQ(run_cli("train " + cfg + " --labels \"" + (dir / "l.pflb").string() + "\" --out \"" + (dir / "n.pfnn").string() + "\"", dir), 3);
    EXPECT_NE(read_text(dir / "stderr.txt").find("epoch"), std::string::npos);
}
