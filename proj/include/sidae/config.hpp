#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sidae/training.hpp"

namespace sidae {

enum class DatasetKind { cifar10, mnist, fashion_mnist, stl10, synthetic };

inline std::string to_string(DatasetKind d) {
    switch (d) {
        case DatasetKind::cifar10: return "cifar10";
        case DatasetKind::mnist: return "mnist";
        case DatasetKind::fashion_mnist: return "fashion_mnist";
        case DatasetKind::stl10: return "stl10";
        case DatasetKind::synthetic: return "synthetic";
    }
    return "?";
}

struct SyntheticSection {
    std::size_t train_per_class = 2048;
    std::size_t test_per_class = 250;
    std::size_t pool_per_class = 256;  // unlabeled pre-training split; 0 pre-trains on train
    std::size_t num_classes = 4;
    std::size_t tints = 2;
    std::uint64_t seed = 7;
    double noise = 0.08;

    SyntheticOptions options(std::size_t image_size, Split split) const {
        SyntheticOptions o;
        o.num_classes = num_classes;
        o.image_size = image_size;
        o.seed = seed;
        o.noise = noise;
        o.tints = tints;
        o.split = split;
        o.n_per_class = split == Split::train ? train_per_class : split == Split::test ? test_per_class : pool_per_class;
        return o;
    }
};

/// Fully resolved experiment description. Every field defaults to the
/// full-scale CIFAR-10 SidAE protocol.
struct ExperimentConfig {
    // experiment
    ModelKind model = ModelKind::sidae;
    DatasetKind dataset = DatasetKind::cifar10;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    std::string out_dir = "runs/experiment";
    std::size_t seeds_parallel = 1;
    // models
    BackboneKind backbone = BackboneKind::resnet18_cifar;
    std::size_t d_hid = 2048;
    std::size_t image_size = 32;
    // losses
    double w = 0.5;
    DaeTarget dae_target = DaeTarget::clean;
    // augmentation
    AugmentationConfig augmentation = AugmentationConfig::color();
    std::optional<bool> blur_enabled;  // unset: on for MNIST-style data only
    // data_ingest
    std::string data_root = "data";
    SyntheticSection synthetic;
    // training
    OptimizerConfig pretrain = OptimizerConfig::pretrain_defaults();
    OptimizerConfig probe = OptimizerConfig::probe_defaults();
    std::size_t checkpoint_interval = 25;
    double labeled_fraction = 0.01;
    std::uint64_t subset_seed = 1234;
    ProbeMode probe_mode = ProbeMode::frozen;
    ProbeInput probe_input = ProbeInput::backbone;

    EncoderConfig encoder() const {
        EncoderConfig e;
        e.backbone = backbone;
        e.d_hid = d_hid;
        e.input_size = image_size;
        return e;
    }

    AugmentationConfig resolved_augmentation() const {
        AugmentationConfig a = augmentation;
        a.output_size = image_size;
        a.blur.enabled = blur_enabled.value_or(dataset == DatasetKind::mnist || dataset == DatasetKind::fashion_mnist);
        return a;
    }

    PretrainConfig pretrain_config(std::uint64_t seed) const {
        PretrainConfig p;
        p.kind = model;
        p.encoder = encoder();
        p.w = w;
        p.dae_target = dae_target;
        p.augmentation = resolved_augmentation();
        p.optimizer = pretrain;
        p.checkpoint_interval = checkpoint_interval;
        p.seed = seed;
        return p;
    }

    void validate() const {
        auto field = [](const std::string& name, auto&& check) {
            try {
                check();
            } catch (const std::invalid_argument& e) {
                throw ConfigError(name + ": " + e.what());
            }
        };
        if (seeds.empty()) throw ConfigError("experiment.seeds: at least one seed is required");
        if (seeds_parallel == 0) throw ConfigError("experiment.seeds_parallel: must be positive");
        field("models", [&] { encoder().validate(); });
        if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("losses.w: must lie in [0, 1]");
        field("augmentation", [&] { resolved_augmentation().validate(); });
        field("training.pretrain", [&] { pretrain.validate("pretrain"); });
        field("training.probe", [&] { probe.validate("probe"); });
        if (checkpoint_interval == 0) throw ConfigError("training.checkpoint_interval: must be positive");
        if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) {
            throw ConfigError("training.labeled_fraction: must lie in (0, 1]");
        }
        if (synthetic.train_per_class == 0 || synthetic.test_per_class == 0 || synthetic.num_classes < 2) {
            throw ConfigError("data_ingest.synthetic: counts must be positive and num_classes >= 2");
        }
        if (synthetic.tints == 0 || synthetic.num_classes % synthetic.tints != 0) {
            throw ConfigError("data_ingest.synthetic.tints: must divide num_classes");
        }
    }
};

/// Desk-scale protocol: tiny backbone on 16x16 synthetic textures, 20
/// pre-training epochs, 1% frozen probe.
inline ExperimentConfig desk_config(ModelKind model = ModelKind::sidae) {
    ExperimentConfig c;
    c.model = model;
    c.dataset = DatasetKind::synthetic;
    c.out_dir = "runs/desk_" + to_string(model);
    c.backbone = BackboneKind::tiny;
    c.d_hid = 64;
    c.image_size = 16;
    c.pretrain.lr = 0.05;
    c.pretrain.batch_size = 64;
    c.pretrain.epochs = 20;
    c.checkpoint_interval = 10;
    c.probe.lr = 0.5;
    c.probe.epochs = 100;
    return c;
}

namespace detail {

/// Strict reader over one JSON object: every key must be consumed.
class Section {
   public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    template <typename V>
    void read(const char* key, V& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        try {
            out = j_.at(key).get<V>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(where(key) + ": wrong type (" + j_.at(key).dump() + ")");
        }
    }

    template <typename E>
    void read_enum(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
        if (!j_.contains(key)) return;
        std::string s;
        read(key, s);
        for (const auto& [n, v] : names) {
            if (s == n) {
                out = v;
                return;
            }
        }
        std::string allowed;
        for (const auto& [n, v] : names) allowed += std::string(allowed.empty() ? "" : "|") + n;
        throw ConfigError(where(key) + ": '" + s + "' is not one of " + allowed);
    }

    bool has(const char* key) const { return j_.contains(key); }

    std::optional<Section> sub(const char* key) {
        if (!j_.contains(key)) return std::nullopt;
        seen_.insert(key);
        return Section(j_.at(key), where(key));
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
        }
    }

   private:
    std::string where(const std::string& key = "") const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_optimizer(Section& s, OptimizerConfig& o) {
    s.read("lr", o.lr);
    s.read("momentum", o.momentum);
    s.read("weight_decay", o.weight_decay);
    s.read("batch_size", o.batch_size);
    s.read("epochs", o.epochs);
    s.read_enum("schedule", o.schedule, {{"cosine", Schedule::cosine}, {"constant", Schedule::constant}});
    s.finish();
}

inline void read_range(Section& s, const char* key, double& lo, double& hi) {
    std::vector<double> v;
    s.read(key, v);
    if (v.empty()) return;
    if (v.size() != 2) throw ConfigError(std::string(key) + ": expected [min, max]");
    lo = v[0];
    hi = v[1];
}

inline nlohmann::ordered_json optimizer_json(const OptimizerConfig& o) {
    return {{"lr", o.lr},
            {"momentum", o.momentum},
            {"weight_decay", o.weight_decay},
            {"batch_size", o.batch_size},
            {"epochs", o.epochs},
            {"schedule", to_string(o.schedule)}};
}

}  // namespace detail

inline const std::initializer_list<std::pair<const char*, ModelKind>> kModelNames{
    {"sidae", ModelKind::sidae}, {"simsiam", ModelKind::simsiam}, {"dae", ModelKind::dae},
    {"supervised", ModelKind::supervised}};
inline const std::initializer_list<std::pair<const char*, DatasetKind>> kDatasetNames{
    {"cifar10", DatasetKind::cifar10}, {"mnist", DatasetKind::mnist}, {"fashion_mnist", DatasetKind::fashion_mnist},
    {"stl10", DatasetKind::stl10}, {"synthetic", DatasetKind::synthetic}};

/// Parses a configuration document; absent keys keep their defaults and
/// unknown keys are errors.
inline ExperimentConfig parse_config(const nlohmann::json& root) {
    using detail::Section;
    ExperimentConfig c;
    Section top(root, "");
    if (auto s = top.sub("experiment")) {
        s->read_enum("model", c.model, kModelNames);
        s->read_enum("dataset", c.dataset, kDatasetNames);
        s->read("seeds", c.seeds);
        s->read("out_dir", c.out_dir);
        s->read("seeds_parallel", c.seeds_parallel);
        s->finish();
    }
    if (auto s = top.sub("models")) {
        s->read_enum("backbone", c.backbone, {{"resnet18_cifar", BackboneKind::resnet18_cifar}, {"tiny", BackboneKind::tiny}});
        s->read("d_hid", c.d_hid);
        s->read("image_size", c.image_size);
        s->finish();
    }
    if (auto s = top.sub("losses")) {
        s->read("w", c.w);
        s->read_enum("dae_target", c.dae_target, {{"clean", DaeTarget::clean}, {"augmented", DaeTarget::augmented}});
        s->finish();
    }
    if (auto s = top.sub("augmentation")) {
        auto& a = c.augmentation;
        detail::read_range(*s, "crop_scale", a.crop_scale_min, a.crop_scale_max);
        detail::read_range(*s, "crop_aspect", a.crop_ratio_min, a.crop_ratio_max);
        if (auto j = s->sub("jitter")) {
            j->read("brightness", a.jitter.brightness);
            j->read("contrast", a.jitter.contrast);
            j->read("saturation", a.jitter.saturation);
            j->read("hue", a.jitter.hue);
            j->read("probability", a.jitter.probability);
            j->finish();
        }
        s->read("grayscale_probability", a.grayscale_probability);
        s->read("hflip_probability", a.hflip_probability);
        if (auto b = s->sub("blur")) {
            detail::read_range(*b, "sigma", a.blur.sigma_min, a.blur.sigma_max);
            b->read("probability", a.blur.probability);
            if (b->has("enabled")) {
                bool enabled = false;
                b->read("enabled", enabled);
                c.blur_enabled = enabled;
            }
            b->finish();
        }
        s->finish();
    }
    if (auto s = top.sub("data_ingest")) {
        s->read("root", c.data_root);
        if (auto y = s->sub("synthetic")) {
            y->read("train_per_class", c.synthetic.train_per_class);
            y->read("test_per_class", c.synthetic.test_per_class);
            y->read("pool_per_class", c.synthetic.pool_per_class);
            y->read("num_classes", c.synthetic.num_classes);
            y->read("tints", c.synthetic.tints);
            y->read("seed", c.synthetic.seed);
            y->read("noise", c.synthetic.noise);
            y->finish();
        }
        s->finish();
    }
    if (auto s = top.sub("training")) {
        if (auto p = s->sub("pretrain")) detail::read_optimizer(*p, c.pretrain);
        if (auto p = s->sub("probe")) detail::read_optimizer(*p, c.probe);
        s->read("checkpoint_interval", c.checkpoint_interval);
        s->read("labeled_fraction", c.labeled_fraction);
        s->read("subset_seed", c.subset_seed);
        s->read_enum("probe_mode", c.probe_mode, {{"frozen", ProbeMode::frozen}, {"finetune", ProbeMode::finetune}});
        s->read_enum("probe_input", c.probe_input,
                     {{"backbone", ProbeInput::backbone}, {"projector", ProbeInput::projector}});
        s->finish();
    }
    top.finish();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// Resolved configuration, in the same layout `parse_config` reads.
inline nlohmann::ordered_json config_json(const ExperimentConfig& c) {
    const auto a = c.resolved_augmentation();
    nlohmann::ordered_json j;
    j["experiment"] = {{"model", to_string(c.model)},
                       {"dataset", to_string(c.dataset)},
                       {"seeds", c.seeds},
                       {"out_dir", c.out_dir},
                       {"seeds_parallel", c.seeds_parallel}};
    j["models"] = {{"backbone", to_string(c.backbone)}, {"d_hid", c.d_hid}, {"image_size", c.image_size}};
    j["losses"] = {{"w", c.w}, {"dae_target", to_string(c.dae_target)}};
    j["augmentation"] = {
        {"crop_scale", {a.crop_scale_min, a.crop_scale_max}},
        {"crop_aspect", {a.crop_ratio_min, a.crop_ratio_max}},
        {"jitter",
         {{"brightness", a.jitter.brightness},
          {"contrast", a.jitter.contrast},
          {"saturation", a.jitter.saturation},
          {"hue", a.jitter.hue},
          {"probability", a.jitter.probability}}},
        {"grayscale_probability", a.grayscale_probability},
        {"hflip_probability", a.hflip_probability},
        {"blur", {{"sigma", {a.blur.sigma_min, a.blur.sigma_max}}, {"probability", a.blur.probability}, {"enabled", a.blur.enabled}}}};
    j["data_ingest"] = {{"root", c.data_root},
                        {"synthetic",
                         {{"train_per_class", c.synthetic.train_per_class},
                          {"test_per_class", c.synthetic.test_per_class},
                          {"pool_per_class", c.synthetic.pool_per_class},
                          {"num_classes", c.synthetic.num_classes},
                          {"tints", c.synthetic.tints},
                          {"seed", c.synthetic.seed},
                          {"noise", c.synthetic.noise}}}};
    j["training"] = {{"pretrain", detail::optimizer_json(c.pretrain)},
                     {"probe", detail::optimizer_json(c.probe)},
                     {"checkpoint_interval", c.checkpoint_interval},
                     {"labeled_fraction", c.labeled_fraction},
                     {"subset_seed", c.subset_seed},
                     {"probe_mode", to_string(c.probe_mode)},
                     {"probe_input", to_string(c.probe_input)}};
    return j;
}

}  // namespace sidae
