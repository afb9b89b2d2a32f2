// pflow: command-line driver for the simulate -> labels -> train -> evaluate
// pipeline. Every stage reads and writes files and writes a JSON manifest
// next to its output.
//
// Exit codes: 0 success, 2 validation or usage error, 3 numeric failure,
// 4 acceptance threshold violated.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "pflow/pflow.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitAcceptance = 4;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    unsigned workers = 0;
    std::string out;
};

void add_common(CLI::App* cmd, Common& c, const char* out_help)
{
    cmd->add_option("--config", c.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override this stage's seed");
    cmd->add_option("--workers", c.workers, "worker threads (0 = all cores); never changes outputs");
    cmd->add_option("--out", c.out, out_help)->required();
}

void write_manifest(const fs::path& output, const json& body)
{
    const fs::path path = output.string() + ".manifest.json";
    std::ofstream out(path, std::ios::binary);
    out << body.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_simulate(const Common& c)
{
    auto cfg = pflow::load_run_config(c.config);
    if (c.seed) cfg.simulation.seed = *c.seed;
    pflow::validate_run_config(cfg);
    const auto model = pflow::resolve_model(cfg);
    const auto sim = pflow::simulation_config(cfg, model, c.workers);

    const auto t0 = std::chrono::steady_clock::now();
    const auto ds = pflow::simulate_dataset(model, sim);
    pflow::save_dataset(ds, c.out);
    const auto& s = cfg.simulation;
    write_manifest(c.out, {{"stage", "simulate"},
                           {"model", model.name},
                           {"n_mu", s.n_mu},
                           {"n_traj", s.n_traj},
                           {"horizon", s.horizon},
                           {"dt", s.dt},
                           {"fine_dt", s.fine_dt},
                           {"stepper", s.stepper},
                           {"init", s.init},
                           {"seed", s.seed},
                           {"J", ds.size()},
                           {"output", c.out}});
    std::cerr << "simulate: J=" << ds.size() << " records in " << seconds_since(t0) << " s -> " << c.out << '\n';
    return kExitOk;
}

int cmd_labels(const Common& c, const std::string& data_path)
{
    auto cfg = pflow::load_run_config(c.config);
    if (c.seed) cfg.score.seed = *c.seed;
    pflow::validate_run_config(cfg);
    const auto model = pflow::resolve_model(cfg);
    const auto ode = pflow::ode_config(cfg, c.workers);
    const auto ds = pflow::load_dataset(data_path);
    pflow::detail::require(ds.d() == model.d && ds.d_mu() == model.d_mu,
                           "labels: dataset dimensions (d=" + std::to_string(ds.d()) + ", d_mu=" + std::to_string(ds.d_mu()) +
                               ") do not match model " + model.name);

    const auto t0 = std::chrono::steady_clock::now();
    const auto index = pflow::build_index(ds, cfg.score.nu_x, cfg.score.nu_mu);
    const auto labels = pflow::generate_labels(ds, index, ode, pflow::RngSeed{cfg.score.seed});
    pflow::save_labels(labels, c.out);
    const auto& s = cfg.score;
    write_manifest(c.out, {{"stage", "labels"},
                           {"model", model.name},
                           {"input", data_path},
                           {"N", s.n_neighbors},
                           {"nu_x", s.nu_x},
                           {"nu_mu", s.nu_mu},
                           {"delta", s.delta},
                           {"n_tau", s.n_tau},
                           {"tau_clip", ode.sched.tau_clip},
                           {"M", s.n_samples},
                           {"sampling", s.sampling},
                           {"seed", s.seed},
                           {"output", c.out}});
    std::cerr << "labels: M=" << labels.size() << " in " << seconds_since(t0) << " s -> " << c.out << '\n';
    return kExitOk;
}

int cmd_train(const Common& c, const std::string& labels_path)
{
    auto cfg = pflow::load_run_config(c.config);
    if (c.seed) cfg.train.seed = *c.seed;
    pflow::validate_run_config(cfg);
    const auto model = pflow::resolve_model(cfg);
    const auto tc = pflow::train_config(cfg);
    const auto labels = pflow::load_labels(labels_path);
    pflow::detail::require(labels.d() == model.d && labels.d_mu() == model.d_mu, "train: labels do not match model " + model.name);

    const auto t0 = std::chrono::steady_clock::now();
    const auto result = pflow::train(labels, cfg.train.hidden, cfg.train.c_scale, tc, [](const pflow::EpochRecord& r) {
        if (r.epoch % 25 == 0) std::cerr << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss << '\n';
    });
    pflow::save_checkpoint(result.net, c.out);

    const fs::path log_path = c.out + ".log.csv";
    std::ofstream log(log_path, std::ios::binary);
    log << "epoch,train_loss,val_loss,best_val_loss\n";
    for (const auto& r : result.log.epochs)
        log << r.epoch << ',' << pflow::format_double(r.train_loss) << ',' << pflow::format_double(r.val_loss) << ','
            << pflow::format_double(r.best_val_loss) << '\n';
    if (!log) throw std::runtime_error("cannot write " + log_path.string());

    const auto& t = cfg.train;
    write_manifest(c.out, {{"stage", "train"},
                           {"model", model.name},
                           {"input", labels_path},
                           {"hidden", t.hidden},
                           {"learning_rate", t.learning_rate},
                           {"batch_size", t.batch_size},
                           {"patience", t.patience},
                           {"val_fraction", t.val_fraction},
                           {"max_epochs", t.max_epochs},
                           {"c_scale", t.c_scale},
                           {"seed", t.seed},
                           {"epochs_run", result.log.epochs.size()},
                           {"best_epoch", result.log.best_epoch},
                           {"early_stopped", result.log.early_stopped},
                           {"best_val_loss", result.log.epochs.empty() ? 0.0 : result.log.epochs.back().best_val_loss},
                           {"n_train", result.log.n_train},
                           {"n_val", result.log.n_val},
                           {"log", log_path.string()},
                           {"output", c.out}});
    std::cerr << "train: " << result.log.epochs.size() << " epochs (best " << result.log.best_epoch << ") in " << seconds_since(t0) << " s -> "
              << c.out << '\n';
    return kExitOk;
}

void write_samples_csv(const pflow::Matrix& samples, const fs::path& path)
{
    std::ofstream out(path, std::ios::binary);
    for (Eigen::Index i = 0; i < samples.rows(); ++i) out << (i ? "," : "") << "x[" << i << "]";
    out << '\n';
    for (Eigen::Index c = 0; c < samples.cols(); ++c) {
        for (Eigen::Index i = 0; i < samples.rows(); ++i) out << (i ? "," : "") << pflow::format_double(samples(i, c));
        out << '\n';
    }
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

pflow::Vector to_vector(const std::vector<double>& v) { return Eigen::Map<const pflow::Vector>(v.data(), static_cast<Eigen::Index>(v.size())); }

int cmd_sample(const Common& c, const std::string& ckpt, const std::vector<double>& x, const std::vector<double>& mu, std::size_t n, std::size_t steps,
               const char* stage)
{
    auto cfg = pflow::load_run_config(c.config);
    if (c.seed) cfg.eval.seed = *c.seed;
    pflow::validate_run_config(cfg);
    const auto net = pflow::load_checkpoint(ckpt);
    pflow::detail::require(x.size() == net.d && mu.size() == net.d_mu, std::string(stage) + ": --x / --mu do not match the checkpoint dimensions");
    pflow::detail::require(n >= 1, std::string(stage) + ": --n must be at least 1");
    const pflow::Vector xv = to_vector(x);
    const pflow::Vector muv = to_vector(mu);
    const pflow::RngSeed seed{cfg.eval.seed};
    const pflow::Matrix out = pflow::rollout(net, xv.replicate(1, static_cast<Eigen::Index>(n)), muv, steps, seed);
    write_samples_csv(out, c.out);
    write_manifest(c.out, {{"stage", stage},
                           {"checkpoint", ckpt},
                           {"x", x},
                           {"mu", mu},
                           {"n", n},
                           {"n_steps", steps},
                           {"seed", cfg.eval.seed},
                           {"output", c.out}});
    return kExitOk;
}

int cmd_evaluate(const Common& c, const std::string& ckpt)
{
    auto cfg = pflow::load_run_config(c.config);
    if (c.seed) cfg.eval.seed = *c.seed;
    pflow::validate_run_config(cfg);
    const auto model = pflow::resolve_model(cfg);
    pflow::validate_eval(cfg, model);
    const auto net = pflow::load_checkpoint(ckpt);
    pflow::detail::require(net.d == model.d && net.d_mu == model.d_mu, "evaluate: checkpoint does not match model " + model.name);

    const auto t0 = std::chrono::steady_clock::now();
    const auto reports = pflow::run_evaluation(cfg, net, model, c.workers);
    pflow::emit_report(reports, c.out);
    const auto violations = pflow::threshold_violations(reports, cfg.eval.thresholds);
    write_manifest(fs::path(c.out) / "report", {{"stage", "evaluate"},
                                                 {"model", model.name},
                                                 {"checkpoint", ckpt},
                                                 {"eval", cfg.raw.value("eval", json::object())},
                                                 {"seed", cfg.eval.seed},
                                                 {"violations", violations},
                                                 {"output", c.out}});
    std::cerr << "evaluate: " << seconds_since(t0) << " s -> " << c.out << '\n';
    std::cout << pflow::report_summary(reports).dump(2) << '\n';
    for (const auto& v : violations) std::cerr << "threshold violated: " << v << '\n';
    return violations.empty() ? kExitOk : kExitAcceptance;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Parametric stochastic flow maps learned from simulated SDE data"};
    app.require_subcommand(1);

    Common simulate_opts, labels_opts, train_opts, sample_opts, rollout_opts, evaluate_opts;
    std::string data_path, labels_path, sample_ckpt, rollout_ckpt, evaluate_ckpt;
    std::vector<double> sample_x, sample_mu, rollout_x, rollout_mu;
    std::size_t sample_n = 1000, rollout_n = 1000, rollout_steps = 10;

    auto* sim = app.add_subcommand("simulate", "simulate trajectories and write a PFDS dataset");
    add_common(sim, simulate_opts, "dataset file to write");

    auto* lab = app.add_subcommand("labels", "generate labeled samples (PFLB) from a dataset");
    add_common(lab, labels_opts, "labels file to write");
    lab->add_option("--data", data_path, "PFDS dataset")->required()->check(CLI::ExistingFile);

    auto* trn = app.add_subcommand("train", "fit the flow-map network and write a PFNN checkpoint");
    add_common(trn, train_opts, "checkpoint file to write");
    trn->add_option("--labels", labels_path, "PFLB labels")->required()->check(CLI::ExistingFile);

    auto* smp = app.add_subcommand("sample", "one-step samples from a checkpoint (CSV)");
    add_common(smp, sample_opts, "CSV file to write");
    smp->add_option("--checkpoint", sample_ckpt, "PFNN checkpoint")->required()->check(CLI::ExistingFile);
    smp->add_option("--x", sample_x, "state")->required()->expected(1, -1);
    smp->add_option("--mu", sample_mu, "parameter")->required()->expected(1, -1);
    smp->add_option("--n", sample_n, "number of samples");

    auto* rol = app.add_subcommand("rollout", "multi-step trajectories from a checkpoint (terminal states, CSV)");
    add_common(rol, rollout_opts, "CSV file to write");
    rol->add_option("--checkpoint", rollout_ckpt, "PFNN checkpoint")->required()->check(CLI::ExistingFile);
    rol->add_option("--x0", rollout_x, "initial state")->required()->expected(1, -1);
    rol->add_option("--mu", rollout_mu, "parameter")->required()->expected(1, -1);
    rol->add_option("--n", rollout_n, "number of trajectories");
    rol->add_option("--steps", rollout_steps, "number of steps");

    auto* evl = app.add_subcommand("evaluate", "compare a checkpoint with the exact laws and write a report directory");
    add_common(evl, evaluate_opts, "report directory");
    evl->add_option("--checkpoint", evaluate_ckpt, "PFNN checkpoint")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (sim->parsed()) return cmd_simulate(simulate_opts);
        if (lab->parsed()) return cmd_labels(labels_opts, data_path);
        if (trn->parsed()) return cmd_train(train_opts, labels_path);
        if (smp->parsed()) return cmd_sample(sample_opts, sample_ckpt, sample_x, sample_mu, sample_n, 1, "sample");
        if (rol->parsed()) return cmd_sample(rollout_opts, rollout_ckpt, rollout_x, rollout_mu, rollout_n, rollout_steps, "rollout");
        if (evl->parsed()) return cmd_evaluate(evaluate_opts, evaluate_ckpt);
    } catch (const pflow::ValidationError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const pflow::FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const pflow::NoOracleError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    } catch (const pflow::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitValidation;
    }
    return kExitValidation;
}
