#pragma once

// The learned stochastic flow map X_{n+1} = X_n + G(X_n, mu, Z), Z ~ N(0, I).
// G is a fully-connected tanh network whose raw output is the displacement
// multiplied by c_scale; it is fit by mini-batch Adam on labeled quadruples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pflow/binary_io.hpp"
#include "pflow/errors.hpp"
#include "pflow/label_gen.hpp"
#include "pflow/rng.hpp"
#include "pflow/sde_models.hpp"

namespace pflow {

struct DenseLayer {
    Matrix weight;  // fan_out x fan_in
    Vector bias;
};

struct FlowMapNet {
    std::vector<std::size_t> layer_sizes;  // [2d + d_mu, hidden..., d]
    std::vector<DenseLayer> layers;
    double c_scale = 1.0;
    std::size_t d = 0;
    std::size_t d_mu = 0;
    std::string model_name;
    double dt = 0.0;

    std::size_t input_dim() const { return 2 * d + d_mu; }

    /// All-zero weights and biases for the given architecture.
    static FlowMapNet zeros(std::size_t d, std::size_t d_mu, const std::vector<std::size_t>& hidden, double c_scale)
    {
        detail::require(d > 0 && d_mu > 0, "flowmap: dimensions must be positive");
        detail::require(c_scale > 0.0 && std::isfinite(c_scale), "flowmap: c_scale must be positive");
        FlowMapNet net;
        net.d = d;
        net.d_mu = d_mu;
        net.c_scale = c_scale;
        net.layer_sizes.push_back(2 * d + d_mu);
        for (const auto h : hidden) {
            detail::require(h > 0, "flowmap: hidden widths must be positive");
            net.layer_sizes.push_back(h);
        }
        net.layer_sizes.push_back(d);
        for (std::size_t l = 0; l + 1 < net.layer_sizes.size(); ++l) {
            const auto fan_in = static_cast<Eigen::Index>(net.layer_sizes[l]);
            const auto fan_out = static_cast<Eigen::Index>(net.layer_sizes[l + 1]);
            net.layers.push_back({Matrix::Zero(fan_out, fan_in), Vector::Zero(fan_out)});
        }
        return net;
    }

    /// Zero biases, weights uniform in +-sqrt(6 / (fan_in + fan_out)).
    static FlowMapNet glorot(std::size_t d, std::size_t d_mu, const std::vector<std::size_t>& hidden, double c_scale, RngSeed seed)
    {
        FlowMapNet net = zeros(d, d_mu, hidden, c_scale);
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            auto rng = substream(seed, StreamTag::TrainInit, {l});
            Matrix& w = net.layers[l].weight;
            const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
            for (Eigen::Index r = 0; r < w.rows(); ++r)
                for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-limit, limit);
        }
        return net;
    }

    void validate() const
    {
        detail::require(layer_sizes.size() >= 2 && layers.size() + 1 == layer_sizes.size(), "flowmap: layer list inconsistent");
        detail::require(layer_sizes.front() == input_dim() && layer_sizes.back() == d, "flowmap: input/output sizes do not match d, d_mu");
        detail::require(c_scale > 0.0 && std::isfinite(c_scale), "flowmap: c_scale must be positive");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto& layer = layers[l];
            detail::require(static_cast<std::size_t>(layer.weight.cols()) == layer_sizes[l] &&
                                static_cast<std::size_t>(layer.weight.rows()) == layer_sizes[l + 1] &&
                                layer.bias.size() == layer.weight.rows(),
                            "flowmap: layer " + std::to_string(l) + " has incompatible shape");
            detail::require(layer.weight.allFinite() && layer.bias.allFinite(), "flowmap: non-finite weights");
        }
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& layer : layers) n += static_cast<std::size_t>(layer.weight.size() + layer.bias.size());
        return n;
    }

    /// Raw network output for a batch of input columns [x; mu; z].
    Matrix raw_forward(const Matrix& inputs) const
    {
        detail::require(static_cast<std::size_t>(inputs.rows()) == input_dim(), "flowmap: input has wrong number of rows");
        Matrix a = inputs;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            Matrix h = layers[l].weight * a;
            h.colwise() += layers[l].bias;
            if (l + 1 < layers.size()) h = h.array().tanh();
            a = std::move(h);
        }
        return a;
    }

    /// Displacement G(x, mu, z): raw output divided by c_scale.
    Vector forward(const Vector& x, const Vector& mu, const Vector& z) const
    {
        detail::require(static_cast<std::size_t>(x.size()) == d && static_cast<std::size_t>(z.size()) == d &&
                            static_cast<std::size_t>(mu.size()) == d_mu,
                        "flowmap: forward input has wrong shape");
        Matrix in(static_cast<Eigen::Index>(input_dim()), 1);
        in << x, mu, z;
        return raw_forward(in).col(0) / c_scale;
    }
};

struct NetGradient {
    std::vector<Matrix> weight;
    std::vector<Vector> bias;

    static NetGradient zeros_like(const FlowMapNet& net)
    {
        NetGradient g;
        for (const auto& layer : net.layers) {
            g.weight.push_back(Matrix::Zero(layer.weight.rows(), layer.weight.cols()));
            g.bias.push_back(Vector::Zero(layer.bias.size()));
        }
        return g;
    }
};

/// Input columns [x_n; mu; z] and targets c_scale * (x_hat - x_n) for the
/// selected samples.
inline std::pair<Matrix, Matrix> assemble_batch(const LabeledDataset& labels, std::span<const std::size_t> which, double c_scale)
{
    const auto d = static_cast<Eigen::Index>(labels.d());
    const auto d_mu = static_cast<Eigen::Index>(labels.d_mu());
    const auto n = static_cast<Eigen::Index>(which.size());
    Matrix inputs(2 * d + d_mu, n);
    Matrix targets(d, n);
    for (Eigen::Index c = 0; c < n; ++c) {
        const auto s = labels.sample(which[static_cast<std::size_t>(c)]);
        for (Eigen::Index i = 0; i < d; ++i) {
            inputs(i, c) = s.x_n[static_cast<std::size_t>(i)];
            inputs(d + d_mu + i, c) = s.z[static_cast<std::size_t>(i)];
            targets(i, c) = c_scale * (s.x_hat_np1[static_cast<std::size_t>(i)] - s.x_n[static_cast<std::size_t>(i)]);
        }
        for (Eigen::Index i = 0; i < d_mu; ++i) inputs(d + i, c) = s.mu[static_cast<std::size_t>(i)];
    }
    return {std::move(inputs), std::move(targets)};
}

/// Mean over columns of ||raw_output - target||^2.
inline double batch_loss(const FlowMapNet& net, const Matrix& inputs, const Matrix& targets)
{
    const Matrix out = net.raw_forward(inputs);
    return (out - targets).colwise().squaredNorm().sum() / static_cast<double>(inputs.cols());
}

/// Loss and its gradient by reverse-mode differentiation through the layers.
inline std::pair<double, NetGradient> loss_and_gradient(const FlowMapNet& net, const Matrix& inputs, const Matrix& targets)
{
    detail::require(inputs.cols() > 0, "loss_and_gradient: empty batch");
    detail::require(targets.rows() == static_cast<Eigen::Index>(net.d) && targets.cols() == inputs.cols(), "loss_and_gradient: target shape");
    const std::size_t n_layers = net.layers.size();
    std::vector<Matrix> acts;  // acts[l] is the input to layer l
    acts.reserve(n_layers + 1);
    acts.push_back(inputs);
    for (std::size_t l = 0; l < n_layers; ++l) {
        Matrix h = net.layers[l].weight * acts.back();
        h.colwise() += net.layers[l].bias;
        if (l + 1 < n_layers) h = h.array().tanh();
        acts.push_back(std::move(h));
    }
    const double batch = static_cast<double>(inputs.cols());
    const Matrix residual = acts.back() - targets;
    const double loss = residual.colwise().squaredNorm().sum() / batch;

    NetGradient grad = NetGradient::zeros_like(net);
    Matrix delta = (2.0 / batch) * residual;  // dL/d(pre-activation) of the current layer
    for (std::size_t l = n_layers; l-- > 0;) {
        grad.weight[l].noalias() = delta * acts[l].transpose();
        grad.bias[l] = delta.rowwise().sum();
        if (l == 0) break;
        Matrix back = net.layers[l].weight.transpose() * delta;
        delta = back.array() * (1.0 - acts[l].array().square());
    }
    return {loss, std::move(grad)};
}

inline std::pair<double, NetGradient> loss_and_gradient(const FlowMapNet& net, const LabeledDataset& batch)
{
    detail::require(!batch.empty(), "loss_and_gradient: empty batch");
    std::vector<std::size_t> all(batch.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto [inputs, targets] = assemble_batch(batch, all, net.c_scale);
    return loss_and_gradient(net, inputs, targets);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 1024;
    std::size_t patience = 50;
    double val_fraction = 0.1;
    std::size_t max_epochs = 2000;
    RngSeed seed{0};
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const
    {
        detail::require(learning_rate >= 0.0 && std::isfinite(learning_rate), "train: learning rate must be nonnegative");
        detail::require(batch_size >= 1, "train: batch size must be at least 1");
        detail::require(patience >= 1, "train: patience must be at least 1");
        detail::require(val_fraction > 0.0 && val_fraction < 1.0, "train: val_fraction must lie in (0, 1)");
        detail::require(max_epochs >= 1, "train: max_epochs must be at least 1");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double best_val_loss = 0.0;
};

struct TrainingLog {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    bool early_stopped = false;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
};

struct TrainResult {
    FlowMapNet net;  // weights from the best validation epoch
    TrainingLog log;
};

class AdamOptimizer {
public:
    AdamOptimizer(const FlowMapNet& net, const TrainConfig& cfg)
        : cfg_(cfg), m_(NetGradient::zeros_like(net)), v_(NetGradient::zeros_like(net))
    {
    }

    void step(FlowMapNet& net, const NetGradient& g)
    {
        ++t_;
        const double b1 = cfg_.adam_beta1;
        const double b2 = cfg_.adam_beta2;
        const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t_));
        const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t_));
        const double lr = cfg_.learning_rate;
        const double eps = cfg_.adam_eps;
        auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
            m = b1 * m + (1.0 - b1) * grad;
            v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
            param.array() -= lr * (m.array() / corr1) / ((v.array() / corr2).sqrt() + eps);
        };
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            update(net.layers[l].weight, g.weight[l], m_.weight[l], v_.weight[l]);
            update(net.layers[l].bias, g.bias[l], m_.bias[l], v_.bias[l]);
        }
    }

private:
    TrainConfig cfg_;
    NetGradient m_;
    NetGradient v_;
    std::uint64_t t_ = 0;
};

inline void shuffle_indices(std::vector<std::size_t>& idx, RandomStream& rng)
{
    for (std::size_t i = idx.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.below(i));
        std::swap(idx[i - 1], idx[j]);
    }
}

/// Mini-batch Adam on a seeded train/validation split with early stopping:
/// training ends once the validation loss has not improved for `patience`
/// consecutive epochs, and the best-validation weights are returned.
inline TrainResult train(const LabeledDataset& labels, const std::vector<std::size_t>& hidden, double c_scale, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {})
{
    cfg.validate();
    detail::require(labels.size() >= 10, "train: need at least 10 labeled samples");

    std::vector<std::size_t> order(labels.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto split_rng = substream(cfg.seed, StreamTag::TrainSplit, {0});
    shuffle_indices(order, split_rng);
    const auto n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.val_fraction * static_cast<double>(labels.size()))));
    const std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    detail::require(!train_idx.empty(), "train: validation split leaves no training data");

    FlowMapNet net = FlowMapNet::glorot(labels.d(), labels.d_mu(), hidden, c_scale, cfg.seed);
    net.model_name = labels.model_name;
    net.dt = labels.dt;

    const auto [val_in, val_target] = assemble_batch(labels, val_idx, c_scale);
    AdamOptimizer adam(net, cfg);

    TrainResult result{net, {}};
    result.log.n_train = train_idx.size();
    result.log.n_val = n_val;
    double best = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto epoch_rng = substream(cfg.seed, StreamTag::TrainEpoch, {epoch});
        shuffle_indices(train_idx, epoch_rng);
        double weighted = 0.0;
        for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(train_idx.size(), start + cfg.batch_size);
            const std::span<const std::size_t> batch(train_idx.data() + start, stop - start);
            const auto [in, target] = assemble_batch(labels, batch, c_scale);
            auto [loss, grad] = loss_and_gradient(net, in, target);
            if (!std::isfinite(loss)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
            weighted += loss * static_cast<double>(batch.size());
            adam.step(net, grad);
        }
        const double val_loss = batch_loss(net, val_in, val_target);
        if (!std::isfinite(val_loss)) throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));

        if (val_loss < best) {
            best = val_loss;
            since_best = 0;
            result.net = net;
            result.log.best_epoch = epoch;
        } else {
            ++since_best;
        }
        const EpochRecord rec{epoch, weighted / static_cast<double>(train_idx.size()), val_loss, best};
        result.log.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (since_best >= cfg.patience) {
            result.log.early_stopped = true;
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr Eigen::Index kSampleChunk = 4096;

/// Latents for step `step` of a rollout: column i holds d consecutive normals
/// of the stream keyed by (seed, step).
inline Matrix step_latents(std::size_t d, std::size_t n, RngSeed seed, std::size_t step)
{
    auto rng = substream(seed, StreamTag::SampleLatent, {step});
    Matrix z(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
    for (Eigen::Index c = 0; c < z.cols(); ++c)
        for (Eigen::Index i = 0; i < z.rows(); ++i) z(i, c) = rng.normal();
    return z;
}

}  // namespace detail

/// states (d x n) <- states + G(states, mu, z) with the given latents.
inline void apply_flow_map(const FlowMapNet& net, Matrix& states, const Vector& mu, const Matrix& latents)
{
    const auto d = static_cast<Eigen::Index>(net.d);
    const auto d_mu = static_cast<Eigen::Index>(net.d_mu);
    detail::require(states.rows() == d && mu.size() == d_mu && latents.rows() == d && latents.cols() == states.cols(),
                    "flowmap: sample shapes do not match the network");
    for (Eigen::Index start = 0; start < states.cols(); start += detail::kSampleChunk) {
        const Eigen::Index n = std::min(detail::kSampleChunk, states.cols() - start);
        Matrix in(2 * d + d_mu, n);
        in.topRows(d) = states.middleCols(start, n);
        in.middleRows(d, d_mu) = mu.replicate(1, n);
        in.bottomRows(d) = latents.middleCols(start, n);
        states.middleCols(start, n) += net.raw_forward(in) / net.c_scale;
    }
}

/// Applies n_steps one-step maps with fresh latents per step and trajectory.
/// `observer(k, states)` is called for k = 0 (initial states) .. n_steps.
inline Matrix rollout(const FlowMapNet& net, const Matrix& x0, const Vector& mu, std::size_t n_steps, RngSeed seed,
                      const std::function<void(std::size_t, const Matrix&)>& observer = {})
{
    detail::require(n_steps >= 1, "rollout: n_steps must be at least 1");
    Matrix states = x0;
    if (observer) observer(0, states);
    for (std::size_t k = 0; k < n_steps; ++k) {
        const Matrix z = detail::step_latents(net.d, static_cast<std::size_t>(states.cols()), seed, k);
        apply_flow_map(net, states, mu, z);
        if (!states.allFinite()) throw NumericError("rollout: non-finite state at step " + std::to_string(k + 1));
        if (observer) observer(k + 1, states);
    }
    return states;
}

/// n independent one-step draws from x (columns of the result).
inline Matrix sample_many(const FlowMapNet& net, const Vector& x, const Vector& mu, std::size_t n, RngSeed seed)
{
    return rollout(net, x.replicate(1, static_cast<Eigen::Index>(n)), mu, 1, seed);
}

/// x + G(x, mu, z) with z ~ N(0, I).
inline Vector sample_one_step(const FlowMapNet& net, const Vector& x, const Vector& mu, RngSeed seed)
{
    return sample_many(net, x, mu, 1, seed).col(0);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "PFNN";
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline io::ByteWriter encode_checkpoint(const FlowMapNet& net)
{
    net.validate();
    io::ByteWriter out;
    out.magic(kCheckpointMagic);
    out.u16(kCheckpointVersion);
    out.u64(net.layers.size());
    for (const auto s : net.layer_sizes) out.u64(s);
    out.f64(net.c_scale);
    for (const auto& layer : net.layers) {
        for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
            for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) out.f64(layer.weight(r, c));
        for (Eigen::Index r = 0; r < layer.bias.size(); ++r) out.f64(layer.bias[r]);
    }
    const nlohmann::json meta = {{"model", net.model_name}, {"d", net.d}, {"d_mu", net.d_mu}, {"dt", net.dt}};
    out.text(meta.dump());
    return out;
}

inline void save_checkpoint(const FlowMapNet& net, const std::filesystem::path& path) { encode_checkpoint(net).write_file(path); }

inline FlowMapNet load_checkpoint(const std::filesystem::path& path)
{
    auto in = io::ByteReader::from_file(path);
    in.expect_magic(kCheckpointMagic);
    io::expect_version(in, kCheckpointVersion);
    const std::uint64_t n_layers = in.u64();
    if (n_layers == 0 || n_layers > 1024) throw FormatError(in.source() + ": implausible layer count");
    FlowMapNet net;
    std::uint64_t n_params = 0;
    for (std::uint64_t l = 0; l <= n_layers; ++l) {
        net.layer_sizes.push_back(in.u64());
        if (net.layer_sizes.back() == 0) throw FormatError(in.source() + ": zero layer size");
        if (l > 0) {
            const auto w = io::checked_mul(net.layer_sizes[l - 1], net.layer_sizes[l], in.source());
            n_params += w + net.layer_sizes[l];
        }
    }
    net.c_scale = in.f64();
    in.expect_remaining_at_least(io::checked_mul(n_params, 8, in.source()), "weights");
    for (std::uint64_t l = 0; l < n_layers; ++l) {
        const auto fan_in = static_cast<Eigen::Index>(net.layer_sizes[l]);
        const auto fan_out = static_cast<Eigen::Index>(net.layer_sizes[l + 1]);
        DenseLayer layer{Matrix(fan_out, fan_in), Vector(fan_out)};
        for (Eigen::Index r = 0; r < fan_out; ++r)
            for (Eigen::Index c = 0; c < fan_in; ++c) layer.weight(r, c) = in.f64();
        for (Eigen::Index r = 0; r < fan_out; ++r) layer.bias[r] = in.f64();
        net.layers.push_back(std::move(layer));
    }
    try {
        const auto meta = nlohmann::json::parse(in.text());
        net.model_name = meta.at("model").get<std::string>();
        net.d = meta.at("d").get<std::size_t>();
        net.d_mu = meta.at("d_mu").get<std::size_t>();
        net.dt = meta.at("dt").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(in.source() + ": bad metadata trailer: " + e.what());
    }
    try {
        net.validate();
    } catch (const ValidationError& e) {
        throw FormatError(in.source() + ": " + e.what());
    }
    return net;
}

}  // namespace pflow
