#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "sidae/augmentation.hpp"
#include "sidae/checkpoint.hpp"
#include "sidae/data.hpp"
#include "sidae/losses.hpp"
#include "sidae/models.hpp"
#include "sidae/optim.hpp"

namespace sidae {

enum class DaeTarget { clean, augmented };
enum class ProbeMode { frozen, finetune };

inline std::string to_string(DaeTarget t) { return t == DaeTarget::clean ? "clean" : "augmented"; }
inline std::string to_string(ProbeMode m) { return m == ProbeMode::frozen ? "frozen" : "finetune"; }

struct PretrainConfig {
    ModelKind kind = ModelKind::sidae;
    EncoderConfig encoder;
    double w = 0.5;
    DaeTarget dae_target = DaeTarget::clean;
    AugmentationConfig augmentation;
    OptimizerConfig optimizer = OptimizerConfig::pretrain_defaults();
    std::size_t checkpoint_interval = 25;
    std::uint64_t seed = 0;

    void validate() const {
        if (kind == ModelKind::supervised) throw ParameterError("pretrain: the supervised baseline is not pre-trained");
        if (!(w >= 0.0 && w <= 1.0)) throw ParameterError("w must lie in [0, 1]");
        if (checkpoint_interval == 0) throw ParameterError("checkpoint_interval must be positive");
        encoder.validate();
        augmentation.validate();
        optimizer.validate("pretrain");
        if (augmentation.output_size != encoder.input_size) {
            throw ParameterError("augmentation output size must equal the encoder input size");
        }
    }

    nlohmann::ordered_json to_json() const {
        return {{"model", to_string(kind)},
                {"w", w},
                {"dae_target", to_string(dae_target)},
                {"lr", optimizer.lr},
                {"momentum", optimizer.momentum},
                {"weight_decay", optimizer.weight_decay},
                {"batch_size", optimizer.batch_size},
                {"epochs", optimizer.epochs},
                {"schedule", to_string(optimizer.schedule)},
                {"checkpoint_interval", checkpoint_interval},
                {"seed", seed}};
    }
};

struct EpochMetrics {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double loss_total = 0.0;
    std::optional<double> loss_si;
    std::optional<double> loss_dae;
    std::string split = "train";
    std::optional<double> accuracy;
};

inline constexpr const char* kMetricsHeader = "epoch,step,lr,loss_total,loss_si,loss_dae,split,accuracy";

inline std::string format_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string metrics_row(const EpochMetrics& m) {
    auto opt = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string(); };
    return std::to_string(m.epoch) + "," + std::to_string(m.step) + "," + format_number(m.lr) + "," +
           format_number(m.loss_total) + "," + opt(m.loss_si) + "," + opt(m.loss_dae) + "," + m.split + "," +
           opt(m.accuracy);
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out << kMetricsHeader << '\n';
    for (const auto& r : rows) out << metrics_row(r) << '\n';
}

inline nlohmann::ordered_json to_json(const EpochMetrics& m) {
    nlohmann::ordered_json j{{"epoch", m.epoch}, {"step", m.step}, {"lr", m.lr}, {"loss_total", m.loss_total}};
    j["loss_si"] = m.loss_si ? nlohmann::ordered_json(*m.loss_si) : nlohmann::ordered_json(nullptr);
    j["loss_dae"] = m.loss_dae ? nlohmann::ordered_json(*m.loss_dae) : nlohmann::ordered_json(nullptr);
    return j;
}

inline EpochMetrics epoch_metrics_from(const nlohmann::ordered_json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<std::size_t>();
    m.step = j.at("step").get<std::size_t>();
    m.lr = j.at("lr").get<double>();
    m.loss_total = j.at("loss_total").get<double>();
    if (!j.at("loss_si").is_null()) m.loss_si = j.at("loss_si").get<double>();
    if (!j.at("loss_dae").is_null()) m.loss_dae = j.at("loss_dae").get<double>();
    return m;
}

/// Objective of `kind` on one batch of views. `x` is the clean batch; it is
/// only read when the reconstruction target is the clean image.
template <typename T>
LossBreakdown<T> pretrain_loss(Model<T>& model, double w, DaeTarget target, const Tensor<T>& x, const Tensor<T>& x1,
                               const Tensor<T>& x2) {
    const Tensor<T>& t1 = target == DaeTarget::clean ? x : x1;
    const Tensor<T>& t2 = target == DaeTarget::clean ? x : x2;
    switch (model.kind()) {
        case ModelKind::simsiam: {
            auto o = model.simsiam_forward(x1, x2);
            return simsiam_loss(o.p1, o.p2, o.z1, o.z2);
        }
        case ModelKind::dae: {
            auto o = model.dae_forward(x1, x2);
            return dae_loss(t1, t2, o.r1, o.r2);
        }
        case ModelKind::sidae: {
            auto o = model.sidae_forward(x1, x2);
            return sidae_loss(w, simsiam_loss(o.p1, o.p2, o.z1, o.z2), dae_loss(t1, t2, o.r1, o.r2));
        }
        default: throw ContractError("pretrain_loss: model kind has no pre-training objective");
    }
}

/// Stream for the views of sample `index` in `epoch` (epochs count from 1,
/// keeping these clear of the weight-initialization streams).
inline SeededRng view_rng(std::uint64_t seed, std::size_t epoch, std::size_t index) {
    return SeededRng(seed, (static_cast<std::uint64_t>(epoch) << 32) | static_cast<std::uint64_t>(index));
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    SeededRng rng(seed, 0xe0000000ULL + epoch);
    rng.shuffle(std::span<std::size_t>(order));
    return order;
}

template <typename T>
struct ViewBatch {
    Tensor<T> x, x1, x2;
};

template <typename T>
ViewBatch<T> make_view_batch(const Dataset& data, std::span<const std::size_t> indices, const AugmentationConfig& aug,
                             std::uint64_t seed, std::size_t epoch) {
    std::vector<Image> v1, v2;
    v1.reserve(indices.size());
    v2.reserve(indices.size());
    for (auto idx : indices) {
        auto views = make_views(data.image(idx), aug, view_rng(seed, epoch, idx));
        v1.push_back(std::move(views.x1));
        v2.push_back(std::move(views.x2));
    }
    return {batch_tensor<T>(data, indices), images_tensor<T>(v1), images_tensor<T>(v2)};
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& run_dir, std::size_t epoch) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04zu.ckpt", epoch);
    return run_dir / "checkpoints" / name;
}

/// Checkpoints fall on multiples of the interval and on the last epoch.
inline bool is_checkpoint_epoch(std::size_t epoch, std::size_t interval, std::size_t total_epochs) {
    return epoch % interval == 0 || epoch == total_epochs;
}

struct PretrainResult {
    std::vector<std::filesystem::path> checkpoints;
    std::vector<EpochMetrics> history;
};

struct PretrainOptions {
    std::filesystem::path run_dir;                 // empty: train in memory, write nothing
    std::optional<std::filesystem::path> resume;   // continue from this checkpoint
    std::size_t stop_after_epoch = 0;              // nonzero: return early (schedule unchanged)
};

/// Self-supervised pre-training of `model` on `data`. Checkpoints land in
/// run_dir/checkpoints at every multiple of the interval and at the last
/// epoch; the metrics CSV is rewritten after every epoch.
template <typename T>
PretrainResult pretrain(Model<T>& model, const Dataset& data, const PretrainConfig& cfg,
                        const PretrainOptions& opts = {}) {
    cfg.validate();
    if (model.kind() != cfg.kind) throw ContractError("pretrain: model kind differs from the configuration");
    if (data.height != cfg.encoder.input_size || data.width != cfg.encoder.input_size ||
        data.channels != cfg.encoder.input_channels) {
        throw ConfigError("pretrain: dataset images are " + shape_str({data.channels, data.height, data.width}) +
                          " but the encoder expects " +
                          shape_str({cfg.encoder.input_channels, cfg.encoder.input_size, cfg.encoder.input_size}));
    }
    const std::size_t batch = cfg.optimizer.batch_size;
    const std::size_t steps_per_epoch = data.count / batch;
    if (steps_per_epoch == 0) {
        throw ParameterError("pretrain: " + std::to_string(data.count) + " images do not fill one batch of " +
                             std::to_string(batch));
    }
    const std::size_t total_steps = steps_per_epoch * cfg.optimizer.epochs;

    PretrainResult result;
    SgdState<T> optimizer;
    std::size_t start_epoch = 1, step = 0;
    if (opts.resume) {
        const Checkpoint ck = read_checkpoint(*opts.resume);
        restore_checkpoint(model, ck, &optimizer);
        start_epoch = ck.header.at("epoch").get<std::size_t>() + 1;
        step = ck.header.at("step").get<std::size_t>();
        for (const auto& row : ck.header.at("history")) result.history.push_back(epoch_metrics_from(row));
    }
    if (!opts.run_dir.empty()) std::filesystem::create_directories(opts.run_dir / "checkpoints");

    auto params = model.parameters();
    model.set_mode(Mode::train);
    const std::size_t last_epoch =
        opts.stop_after_epoch ? std::min(opts.stop_after_epoch, cfg.optimizer.epochs) : cfg.optimizer.epochs;
    for (std::size_t epoch = start_epoch; epoch <= last_epoch; ++epoch) {
        const auto order = epoch_order(data.count, cfg.seed, epoch);
        double sum_total = 0.0, sum_si = 0.0, sum_dae = 0.0;
        double lr = 0.0;
        for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
            const std::span<const std::size_t> idx(order.data() + s * batch, batch);
            const auto views = make_view_batch<T>(data, idx, cfg.augmentation, cfg.seed, epoch);
            auto loss = pretrain_loss(model, cfg.w, cfg.dae_target, views.x, views.x1, views.x2);
            const double value = loss.value();
            if (!std::isfinite(value)) {
                throw NumericalError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(step) + "; checkpoints up to the previous interval are kept");
            }
            for (auto& p : params.params) p.tensor.zero_grad();
            loss.total.backward();
            lr = scheduled_lr(cfg.optimizer, step, total_steps);
            sgd_step(params, optimizer, cfg.optimizer, lr);
            sum_total += value;
            sum_si += loss.l_si.value_or(0.0);
            sum_dae += loss.l_dae.value_or(0.0);
        }
        const double n = static_cast<double>(steps_per_epoch);
        EpochMetrics m;
        m.epoch = epoch;
        m.step = step;
        m.lr = lr;
        m.loss_total = sum_total / n;
        if (cfg.kind != ModelKind::dae) m.loss_si = sum_si / n;
        if (cfg.kind != ModelKind::simsiam) m.loss_dae = sum_dae / n;
        result.history.push_back(m);

        if (!opts.run_dir.empty()) {
            write_metrics_csv(opts.run_dir / "metrics.csv", result.history);
            if (is_checkpoint_epoch(epoch, cfg.checkpoint_interval, cfg.optimizer.epochs)) {
                nlohmann::ordered_json extra{{"epoch", epoch}, {"step", step}, {"pretrain", cfg.to_json()}};
                extra["history"] = nlohmann::ordered_json::array();
                for (const auto& h : result.history) extra["history"].push_back(to_json(h));
                const auto path = checkpoint_path(opts.run_dir, epoch);
                write_checkpoint(capture_checkpoint(model, &optimizer, extra), path);
                result.checkpoints.push_back(path);
            }
        }
    }
    for (auto& p : params.params) p.tensor.zero_grad();
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline double evaluate_accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw DimensionError("evaluate_accuracy: length mismatch");
    if (labels.empty()) throw ParameterError("evaluate_accuracy: empty split");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    auto d = logits.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (d[i * k + j] > d[i * k + best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

template <typename T>
Tensor<T> model_features(Model<T>& model, const Tensor<T>& x, ProbeInput input) {
    return input == ProbeInput::backbone ? model.encoder().features(x, model.mode()) : model.encode(x);
}

template <typename T>
std::size_t feature_width(Model<T>& model, ProbeInput input) {
    return input == ProbeInput::backbone ? model.config().feature_dim() : model.config().d_hid;
}

/// Eval-mode features of the selected images, (n, width), without a graph.
template <typename T>
Tensor<T> extract_features(Model<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                           ProbeInput input, std::size_t batch = 256) {
    NoGradGuard no_grad;
    const Mode saved = model.mode();
    model.set_mode(Mode::eval);
    const std::size_t width = feature_width(model, input);
    std::vector<T> out(indices.size() * width);
    for (std::size_t s = 0; s < indices.size(); s += batch) {
        const auto idx = indices.subspan(s, std::min(batch, indices.size() - s));
        auto f = model_features(model, batch_tensor<T>(data, idx), input);
        std::copy(f.data().begin(), f.data().end(), out.begin() + static_cast<std::ptrdiff_t>(s * width));
    }
    model.set_mode(saved);
    return Tensor<T>::from({indices.size(), width}, std::move(out));
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> rows) {
    const std::size_t width = x.numel() / x.dim(0);
    std::vector<T> out(rows.size() * width);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                    out.begin() + static_cast<std::ptrdiff_t>(i * width));
    }
    Shape s = x.shape();
    s[0] = rows.size();
    return Tensor<T>::from(std::move(s), std::move(out));
}

/// FNV-1a over parameter names, values and BN running statistics.
template <typename T>
std::uint64_t parameter_hash(const ParameterList<T>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
    };
    for (const auto& p : params.params) {
        mix(p.name.data(), p.name.size());
        mix(p.tensor.data().data(), p.tensor.numel() * sizeof(T));
    }
    for (const auto& b : params.buffers) {
        mix(b.name.data(), b.name.size());
        mix(b.stats->mean.data(), b.stats->mean.size() * sizeof(T));
        mix(b.stats->var.data(), b.stats->var.size() * sizeof(T));
    }
    return h;
}

struct ProbeConfig {
    ProbeMode mode = ProbeMode::frozen;
    ProbeInput input = ProbeInput::backbone;
    OptimizerConfig optimizer = OptimizerConfig::probe_defaults();
    std::uint64_t seed = 0;
};

struct ProbeResult {
    double test_accuracy = 0.0;
    std::vector<EpochMetrics> history;
};

namespace detail {

template <typename T>
std::vector<int> labels_at(const Dataset& ds, std::span<const std::size_t> idx) {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ds.label(idx[i]);
    return out;
}

inline void check_probe_inputs(const Dataset& train, const SubsetSpec& subset, const Dataset& test,
                               const EncoderConfig& cfg) {
    if (subset.indices.empty()) throw ParameterError("probe: labeled subset is empty");
    if (!train.labels || !test.labels) throw ParameterError("probe: train and test splits must be labeled");
    for (const Dataset* ds : {&train, &test}) {
        if (ds->channels != cfg.input_channels || ds->height != cfg.input_size || ds->width != cfg.input_size) {
            throw ConfigError("probe: " + ds->name + " images are " + shape_str({ds->channels, ds->height, ds->width}) +
                              " but the checkpoint expects " +
                              shape_str({cfg.input_channels, cfg.input_size, cfg.input_size}));
        }
    }
    for (auto i : subset.indices) {
        if (i >= train.count) throw ParameterError("probe: subset index " + std::to_string(i) + " out of range");
    }
}

}  // namespace detail

/// Trains a linear classifier on the labeled subset and reports test accuracy.
/// Frozen: features are computed once with the encoder in eval mode and no
/// encoder state changes. Finetune: encoder and head train together.
template <typename T>
ProbeResult probe(Model<T>& model, const Dataset& train, const SubsetSpec& subset, const Dataset& test,
                  const ProbeConfig& cfg) {
    detail::check_probe_inputs(train, subset, test, model.config());
    cfg.optimizer.validate("probe");
    const std::size_t classes = std::max(train.num_classes, test.num_classes);
    SeededRng head_rng(cfg.seed, 4);
    ClassifierHead<T> head(feature_width(model, cfg.input), classes, head_rng);
    ParameterList<T> head_params;
    head.collect("head", head_params);

    const auto& sub = subset.indices;
    const std::vector<int> sub_labels = detail::labels_at<T>(train, sub);
    const std::size_t batch = cfg.optimizer.batch_size;
    const std::size_t steps_per_epoch = (sub.size() + batch - 1) / batch;
    const std::size_t total_steps = steps_per_epoch * cfg.optimizer.epochs;
    SgdState<T> optimizer;
    ProbeResult result;

    Tensor<T> frozen_features;
    ParameterList<T> params = head_params;
    if (cfg.mode == ProbeMode::frozen) {
        frozen_features = extract_features(model, train, std::span<const std::size_t>(sub), cfg.input);
    } else {
        // Only the layers on the feature path train; the projector is idle
        // when the probe reads backbone features.
        params = ParameterList<T>();
        if (cfg.input == ProbeInput::backbone) {
            model.encoder().backbone().collect("encoder.backbone", params);
        } else {
            model.encoder().collect("encoder", params);
        }
        params.append(head_params);
    }

    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.optimizer.epochs; ++epoch) {
        const auto order = epoch_order(sub.size(), cfg.seed ^ 0x9e3779b97f4a7c15ULL, epoch);
        double loss_sum = 0.0;
        std::size_t loss_steps = 0;
        double lr = 0.0;
        for (std::size_t s = 0; s < sub.size(); s += batch, ++step) {
            const std::span<const std::size_t> pos(order.data() + s, std::min(batch, sub.size() - s));
            std::vector<int> y(pos.size());
            std::vector<std::size_t> rows(pos.size());
            for (std::size_t i = 0; i < pos.size(); ++i) {
                y[i] = sub_labels[pos[i]];
                rows[i] = sub[pos[i]];
            }
            Tensor<T> logits;
            if (cfg.mode == ProbeMode::frozen) {
                logits = head(gather_rows(frozen_features, pos));
            } else {
                if (pos.size() < 2) continue;  // batch statistics need two samples
                model.set_mode(Mode::train);
                logits = head(model_features(model, batch_tensor<T>(train, rows), cfg.input));
            }
            auto loss = cross_entropy(logits, std::span<const int>(y));
            if (!std::isfinite(static_cast<double>(loss.item()))) {
                throw NumericalError("probe: non-finite loss at epoch " + std::to_string(epoch));
            }
            for (auto& p : params.params) p.tensor.zero_grad();
            loss.backward();
            lr = scheduled_lr(cfg.optimizer, step, total_steps);
            sgd_step(params, optimizer, cfg.optimizer, lr);
            loss_sum += static_cast<double>(loss.item());
            ++loss_steps;
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.step = step;
        m.lr = lr;
        m.loss_total = loss_steps ? loss_sum / static_cast<double>(loss_steps) : 0.0;
        m.split = "probe";
        result.history.push_back(m);
    }
    for (auto& p : params.params) p.tensor.zero_grad();

    const auto test_idx = all_indices(test.count);
    const auto test_features = extract_features(model, test, std::span<const std::size_t>(test_idx), cfg.input);
    std::vector<int> predictions;
    {
        NoGradGuard no_grad;
        predictions = argmax_rows(head(test_features));
    }
    result.test_accuracy = evaluate_accuracy(predictions, std::span<const int>(*test.labels));
    EpochMetrics final_row;
    final_row.epoch = cfg.optimizer.epochs;
    final_row.step = step;
    final_row.split = "test";
    final_row.accuracy = result.test_accuracy;
    result.history.push_back(final_row);
    return result;
}

/// Backbone and head trained from scratch on the subset with the probe settings.
template <typename T>
ProbeResult supervised_baseline(const EncoderConfig& encoder, const Dataset& train, const SubsetSpec& subset,
                                const Dataset& test, ProbeConfig cfg) {
    Model<T> model(ModelKind::supervised, encoder, cfg.seed);
    cfg.mode = ProbeMode::finetune;
    return probe(model, train, subset, test, cfg);
}

struct Summary {
    std::size_t n = 0;
    double mean = 0.0;
    std::optional<double> std_error;  // sample std / sqrt(n); undefined for n = 1
};

inline Summary summarize(std::span<const double> values) {
    Summary s;
    s.n = values.size();
    if (s.n == 0) return s;
    for (double v : values) s.mean += v;
    s.mean /= static_cast<double>(s.n);
    if (s.n > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - s.mean) * (v - s.mean);
        s.std_error = std::sqrt(ss / static_cast<double>(s.n - 1)) / std::sqrt(static_cast<double>(s.n));
    }
    return s;
}

}  // namespace sidae
