#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "sidae/training.hpp"

using namespace sidae;
namespace fs = std::filesystem;

namespace {

EncoderConfig tiny8() { return {BackboneKind::tiny, 32, 3, 8}; }

PretrainConfig small_config(ModelKind kind, std::size_t epochs = 3) {
    PretrainConfig c;
    c.kind = kind;
    c.encoder = tiny8();
    c.augmentation = AugmentationConfig::color(8);
    c.optimizer.lr = 0.05;
    c.optimizer.batch_size = 16;
    c.optimizer.epochs = epochs;
    c.checkpoint_interval = 2;
    c.seed = 11;
    return c;
}

Dataset small_data(std::size_t per_class = 12) { return synthetic_dataset(per_class, 4, 2, 8); }

class TempDir {
   public:
    explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("sidae_train_" + tag)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

   private:
    fs::path path_;
};

std::string file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

using GradMap = std::map<std::string, std::vector<double>>;

GradMap step_gradients(ModelKind kind, double w, std::uint64_t seed) {
    Model<double> m(kind, tiny8(), seed);
    const Dataset data = small_data(2);
    const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5};
    const auto views = make_view_batch<double>(data, idx, AugmentationConfig::color(8), 3, 1);
    pretrain_loss(m, w, DaeTarget::clean, views.x, views.x1, views.x2).total.backward();
    GradMap out;
    for (const auto& p : m.parameters().params) {
        out[p.name] = p.tensor.has_grad() ? std::vector<double>(p.tensor.grad().begin(), p.tensor.grad().end())
                                          : std::vector<double>(p.tensor.numel(), 0.0);
    }
    return out;
}

// max |a - b| / max |b| over the parameters sharing `prefix`.
double relative_gap(const GradMap& a, const GradMap& b, const std::string& prefix, std::size_t* compared) {
    double diff = 0.0, scale = 0.0;
    *compared = 0;
    for (const auto& [name, gb] : b) {
        if (name.rfind(prefix, 0) != 0) continue;
        const auto& ga = a.at(name);
        ++*compared;
        for (std::size_t i = 0; i < gb.size(); ++i) {
            diff = std::max(diff, std::abs(ga[i] - gb[i]));
            scale = std::max(scale, std::abs(gb[i]));
        }
    }
    return scale > 0.0 ? diff / scale : diff;
}

}  // namespace

TEST(CosineLr, Endpoints) {
    EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 0.05), 0.05);
    EXPECT_NEAR(cosine_lr(50, 100, 0.05), 0.025, 1e-15);
    EXPECT_NEAR(cosine_lr(100, 100, 0.05), 0.0, 1e-15);
    EXPECT_NEAR(cosine_lr(25, 100, 1.0), 0.5 * (1.0 + std::cos(std::numbers::pi / 4)), 1e-15);
    EXPECT_THROW(cosine_lr(101, 100, 0.05), ParameterError);
    EXPECT_THROW(cosine_lr(0, 0, 0.05), ParameterError);
    OptimizerConfig c;
    c.schedule = Schedule::constant;
    c.lr = 0.3;
    EXPECT_EQ(scheduled_lr(c, 77, 100), 0.3);
}

TEST(Sgd, MomentumAccumulates) {
    auto p = Tensor<double>::from({1}, {1.0}, true);
    ParameterList<double> params;
    params.add("p", p);
    SgdState<double> state;
    OptimizerConfig cfg;
    cfg.momentum = 0.9;
    cfg.weight_decay = 0.0;
    for (int i = 0; i < 2; ++i) {
        p.zero_grad();
        sum(scale(p, 1.0)).backward();  // gradient 1
        sgd_step(params, state, cfg, 0.1);
    }
    // v: 1 then 1.9; p: 1 - 0.1 - 0.19
    EXPECT_NEAR(state.velocity[0][0], 1.9, 1e-15);
    EXPECT_NEAR(p.data()[0], 0.71, 1e-15);
}

TEST(Sgd, WeightDecayEntersBeforeMomentum) {
    SeededRng rng(1);
    std::vector<double> init(5), g(5);
    for (auto& v : init) v = rng.normal();
    for (auto& v : g) v = rng.normal();
    auto p = Tensor<double>::from({5}, init, true);
    ParameterList<double> params;
    params.add("p", p);
    SgdState<double> state;
    OptimizerConfig cfg;
    cfg.momentum = 0.5;
    cfg.weight_decay = 0.1;
    std::vector<double> ref = init, vel(5, 0.0);
    for (int step = 0; step < 3; ++step) {
        p.zero_grad();
        sum(mul(p, Tensor<double>::from({5}, g))).backward();
        sgd_step(params, state, cfg, 0.2);
        for (std::size_t i = 0; i < 5; ++i) {
            vel[i] = 0.5 * vel[i] + g[i] + 0.1 * ref[i];
            ref[i] -= 0.2 * vel[i];
        }
    }
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(p.data()[i], ref[i], 1e-14);
}

TEST(Sgd, MissingGradientIsAContractViolation) {
    auto p = Tensor<double>::from({2}, {1.0, 2.0}, true);
    ParameterList<double> params;
    params.add("p", p);
    SgdState<double> state;
    EXPECT_THROW(sgd_step(params, state, OptimizerConfig{}, 0.1), ContractError);
}

TEST(Equivalence, SidaeAtWZeroIsSimSiam) {
    const auto s = step_gradients(ModelKind::sidae, 0.0, 4), r = step_gradients(ModelKind::simsiam, 0.0, 4);
    std::size_t n = 0;
    EXPECT_LE(relative_gap(s, r, "encoder.", &n), 1e-6);
    EXPECT_GT(n, 0u);
    EXPECT_LE(relative_gap(s, r, "predictor.", &n), 1e-6);
    EXPECT_GT(n, 0u);
}

TEST(Equivalence, SidaeAtWOneIsDae) {
    const auto s = step_gradients(ModelKind::sidae, 1.0, 4), r = step_gradients(ModelKind::dae, 1.0, 4);
    std::size_t n = 0;
    EXPECT_LE(relative_gap(s, r, "encoder.", &n), 1e-6);
    EXPECT_GT(n, 0u);
    EXPECT_LE(relative_gap(s, r, "decoder.", &n), 1e-6);
    EXPECT_GT(n, 0u);
}

TEST(Equivalence, InteriorWeightMixesBothObjectives) {
    const auto s = step_gradients(ModelKind::sidae, 0.5, 4), r = step_gradients(ModelKind::simsiam, 0.5, 4);
    std::size_t n = 0;
    EXPECT_GT(relative_gap(s, r, "encoder.", &n), 1e-3);
}

TEST(Pretrain, DaeLossDecreases) {
    Model<float> m(ModelKind::dae, tiny8(), 1);
    auto cfg = small_config(ModelKind::dae, 6);
    const auto res = pretrain(m, small_data(), cfg);
    ASSERT_EQ(res.history.size(), 6u);
    EXPECT_LT(res.history.back().loss_total, res.history.front().loss_total);
    EXPECT_FALSE(res.history.front().loss_si.has_value());
    EXPECT_TRUE(res.history.front().loss_dae.has_value());
    EXPECT_TRUE(res.checkpoints.empty());
}

TEST(Pretrain, DropsTheLastIncompleteBatch) {
    Model<float> m(ModelKind::simsiam, tiny8(), 1);
    auto cfg = small_config(ModelKind::simsiam, 2);
    const auto res = pretrain(m, small_data(9), cfg);  // 36 images, batches of 16
    EXPECT_EQ(res.history[0].step, 2u);
    EXPECT_EQ(res.history[1].step, 4u);
    EXPECT_GT(res.history[1].lr, 0.0);
    Model<float> big(ModelKind::simsiam, tiny8(), 1);
    auto too_big = cfg;
    too_big.optimizer.batch_size = 64;
    EXPECT_THROW(pretrain(big, small_data(9), too_big), ParameterError);
}

TEST(Pretrain, RejectsMismatchedInputs) {
    Model<float> m(ModelKind::sidae, tiny8(), 1);
    EXPECT_THROW(pretrain(m, synthetic_dataset(8, 4, 2, 16), small_config(ModelKind::sidae)), ConfigError);
    EXPECT_THROW(pretrain(m, small_data(), small_config(ModelKind::dae)), ContractError);
    auto bad = small_config(ModelKind::sidae);
    bad.w = 1.5;
    EXPECT_THROW(pretrain(m, small_data(), bad), ParameterError);
}

TEST(Pretrain, NonFiniteLossStops) {
    Model<float> m(ModelKind::dae, tiny8(), 1);
    auto params = m.parameters();
    params.params.front().tensor.data()[0] = std::nanf("");
    EXPECT_THROW(pretrain(m, small_data(), small_config(ModelKind::dae)), NumericalError);
}

TEST(Checkpoint, RoundTripRestoresEverything) {
    Model<float> a(ModelKind::sidae, tiny8(), 5);
    pretrain(a, small_data(), small_config(ModelKind::sidae, 1));
    const auto ck = capture_checkpoint<float>(a, nullptr, nlohmann::ordered_json{{"note", "x"}});
    const auto bytes = serialize_checkpoint(ck);
    const auto back = parse_checkpoint(bytes, "mem");
    EXPECT_EQ(serialize_checkpoint(back), bytes);
    Model<float> b(ModelKind::sidae, tiny8(), 6);
    EXPECT_NE(parameter_hash(b.parameters()), parameter_hash(a.parameters()));
    restore_checkpoint(b, back);
    EXPECT_EQ(parameter_hash(b.parameters()), parameter_hash(a.parameters()));
    EXPECT_EQ(back.header.at("note"), "x");

    Model<float> other(ModelKind::dae, tiny8(), 5);
    EXPECT_THROW(restore_checkpoint(other, back), ConfigError);
    Model<float> wider(ModelKind::sidae, {BackboneKind::tiny, 64, 3, 8}, 5);
    EXPECT_THROW(restore_checkpoint(wider, back), ConfigError);
}

TEST(Checkpoint, CorruptionIsDetected) {
    Model<float> a(ModelKind::simsiam, tiny8(), 5);
    const auto bytes = serialize_checkpoint(capture_checkpoint<float>(a, nullptr, nlohmann::ordered_json::object()));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(parse_checkpoint(bad_magic, "m"), FormatError);
    auto bad_version = bytes;
    bad_version[8] = 9;
    EXPECT_THROW(parse_checkpoint(bad_version, "m"), FormatError);
    EXPECT_THROW(parse_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 3), "m"), FormatError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(parse_checkpoint(trailing, "m"), FormatError);
    EXPECT_THROW(read_checkpoint("/nonexistent/x.ckpt"), MissingDataError);
}

TEST(Checkpoint, ResumeMatchesAnUninterruptedRun) {
    TempDir straight("straight"), split("split");
    const Dataset data = small_data();
    auto cfg = small_config(ModelKind::sidae, 4);
    {
        Model<float> m(ModelKind::sidae, tiny8(), cfg.seed);
        pretrain(m, data, cfg, {straight.path(), std::nullopt, 0});
    }
    {
        Model<float> m(ModelKind::sidae, tiny8(), cfg.seed);
        pretrain(m, data, cfg, {split.path(), std::nullopt, 2});
        EXPECT_FALSE(fs::exists(checkpoint_path(split.path(), 4)));
    }
    {
        Model<float> m(ModelKind::sidae, tiny8(), 999);
        const auto res = pretrain(m, data, cfg, {split.path(), checkpoint_path(split.path(), 2), 0});
        EXPECT_EQ(res.history.size(), 4u);
    }
    EXPECT_EQ(file_bytes(checkpoint_path(split.path(), 4)), file_bytes(checkpoint_path(straight.path(), 4)));
    EXPECT_EQ(file_bytes(split.path() / "metrics.csv"), file_bytes(straight.path() / "metrics.csv"));
}

TEST(Determinism, RepeatedRunsAreByteIdentical) {
    TempDir a("det_a"), b("det_b");
    const Dataset data = small_data();
    const auto cfg = small_config(ModelKind::sidae, 3);
    for (const auto* dir : {&a, &b}) {
        Model<float> m(ModelKind::sidae, tiny8(), cfg.seed);
        const auto res = pretrain(m, data, cfg, {dir->path(), std::nullopt, 0});
        EXPECT_EQ(res.checkpoints.size(), 2u);  // epoch 2 and the last epoch
    }
    for (std::size_t e : {2u, 3u}) {
        const auto ca = file_bytes(checkpoint_path(a.path(), e));
        ASSERT_FALSE(ca.empty());
        EXPECT_EQ(ca, file_bytes(checkpoint_path(b.path(), e)));
    }
    const auto csv = file_bytes(a.path() / "metrics.csv");
    EXPECT_EQ(csv, file_bytes(b.path() / "metrics.csv"));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kMetricsHeader);
}

TEST(Probe, FrozenLeavesTheEncoderUntouched) {
    Model<float> m(ModelKind::sidae, tiny8(), 3);
    pretrain(m, small_data(), small_config(ModelKind::sidae, 1));
    const Dataset train = small_data(20), test = synthetic_dataset(10, 4, 2, 8, Split::test);
    const auto subset = subset_indices(train, 0.5, 1);
    const auto before = parameter_hash(m.parameters());
    ProbeConfig pc;
    pc.optimizer.epochs = 5;
    const auto r = probe(m, train, subset, test, pc);
    EXPECT_EQ(parameter_hash(m.parameters()), before);
    EXPECT_GE(r.test_accuracy, 0.0);
    EXPECT_LE(r.test_accuracy, 1.0);
    EXPECT_EQ(r.history.back().split, "test");

    pc.mode = ProbeMode::finetune;
    probe(m, train, subset, test, pc);
    EXPECT_NE(parameter_hash(m.parameters()), before);
}

TEST(Probe, ProjectorInputAndValidation) {
    Model<float> m(ModelKind::simsiam, tiny8(), 3);
    const Dataset train = small_data(20), test = synthetic_dataset(10, 4, 2, 8, Split::test);
    const auto subset = subset_indices(train, 0.5, 1);
    ProbeConfig pc;
    pc.optimizer.epochs = 2;
    pc.input = ProbeInput::projector;
    EXPECT_NO_THROW(probe(m, train, subset, test, pc));
    EXPECT_THROW(probe(m, synthetic_dataset(4, 4, 2, 16), subset, test, pc), ConfigError);
    SubsetSpec out_of_range{"synthetic", 1.0, 0, {1000}};
    EXPECT_THROW(probe(m, train, out_of_range, test, pc), ParameterError);
}

TEST(Probe, LearnsASeparableTask) {
    // Raw tint is linearly readable from random features of a tiny net.
    Model<float> m(ModelKind::simsiam, tiny8(), 8);
    SyntheticOptions o;
    o.n_per_class = 60;
    o.num_classes = 2;
    o.tints = 2;
    o.image_size = 8;
    o.chroma_min = o.chroma_max = 0.3;
    const Dataset train = synthetic_dataset(o);
    o.split = Split::test;
    o.n_per_class = 50;
    const Dataset test = synthetic_dataset(o);
    ProbeConfig pc;
    pc.optimizer.epochs = 100;
    pc.optimizer.lr = 0.5;
    EXPECT_GT(probe(m, train, subset_indices(train, 1.0, 0), test, pc).test_accuracy, 0.9);
}

TEST(Probe, UntrainedHeadIsNearChance) {
    Model<float> m(ModelKind::sidae, tiny8(), 5);
    const Dataset test = synthetic_dataset(100, 4, 2, 8, Split::test);
    const auto idx = all_indices(test.count);
    SeededRng head_rng(5, 4);
    ClassifierHead<float> head(feature_width(m, ProbeInput::backbone), 4, head_rng);
    const auto f = extract_features(m, test, std::span<const std::size_t>(idx), ProbeInput::backbone);
    NoGradGuard no_grad;
    const double acc = evaluate_accuracy(argmax_rows(head(f)), std::span<const int>(*test.labels));
    EXPECT_NEAR(acc, 0.25, 0.1);
}

namespace {

struct PairedData {
    Dataset pool, train, test;
};

PairedData two_class_data() {
    SyntheticOptions o;
    o.num_classes = 2;
    o.tints = 2;
    o.image_size = 16;
    o.seed = 21;
    o.split = Split::unlabeled;
    o.n_per_class = 128;
    PairedData d{synthetic_dataset(o), {}, {}};
    o.split = Split::train;
    o.n_per_class = 256;
    d.train = synthetic_dataset(o);
    o.split = Split::test;
    o.n_per_class = 200;
    d.test = synthetic_dataset(o);
    return d;
}

}  // namespace

TEST(Probe, PretrainingBeatsAnUntrainedBackbone) {
    const PairedData d = two_class_data();
    const auto subset = subset_indices(d.train, 0.1, 3);
    const EncoderConfig enc{BackboneKind::tiny, 64, 3, 16};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        PretrainConfig pc;
        pc.kind = ModelKind::sidae;
        pc.encoder = enc;
        pc.augmentation = AugmentationConfig::color(16);
        pc.optimizer.lr = 0.05;
        pc.optimizer.batch_size = 64;
        pc.optimizer.epochs = 20;
        pc.seed = seed;
        ProbeConfig probe_cfg;
        probe_cfg.optimizer.lr = 0.5;
        probe_cfg.optimizer.epochs = 100;
        probe_cfg.seed = seed;

        Model<float> untrained(ModelKind::sidae, enc, seed);
        const double base = probe(untrained, d.train, subset, d.test, probe_cfg).test_accuracy;
        Model<float> trained(ModelKind::sidae, enc, seed);
        pretrain(trained, d.pool, pc);
        const double acc = probe(trained, d.train, subset, d.test, probe_cfg).test_accuracy;
        EXPECT_GT(acc, base) << "seed " << seed;
    }
}

TEST(Supervised, FullDataMatchesARandomFrozenProbe) {
    const PairedData d = two_class_data();
    const EncoderConfig enc{BackboneKind::tiny, 64, 3, 16};
    const auto all = subset_indices(d.train, 1.0, 0);
    ProbeConfig pc;
    pc.optimizer.lr = 0.05;
    pc.optimizer.batch_size = 64;
    pc.optimizer.epochs = 5;
    pc.seed = 2;
    const auto sup = supervised_baseline<float>(enc, d.train, all, d.test, pc);
    Model<float> random_model(ModelKind::supervised, enc, 2);
    const double frozen = probe(random_model, d.train, all, d.test, pc).test_accuracy;
    EXPECT_GE(sup.test_accuracy, frozen);
    EXPECT_EQ(supervised_baseline<float>(enc, d.train, all, d.test, pc).test_accuracy, sup.test_accuracy);
    Model<float> m(ModelKind::supervised, enc, 2);
    EXPECT_THROW(pretrain(m, d.pool, PretrainConfig{.kind = ModelKind::supervised, .encoder = enc}), ParameterError);
}

TEST(Evaluate, AccuracyIsTheConfusionTrace) {
    SeededRng rng(3);
    std::vector<int> pred(500), label(500);
    for (std::size_t i = 0; i < 500; ++i) {
        label[i] = static_cast<int>(rng.below(10));
        pred[i] = rng.bernoulli(0.6) ? label[i] : static_cast<int>(rng.below(10));
    }
    std::vector<std::vector<int>> confusion(10, std::vector<int>(10, 0));
    for (std::size_t i = 0; i < 500; ++i) ++confusion[label[i]][pred[i]];
    int trace = 0;
    for (int k = 0; k < 10; ++k) trace += confusion[k][k];
    EXPECT_DOUBLE_EQ(evaluate_accuracy(pred, label), trace / 500.0);
    EXPECT_THROW(evaluate_accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), DimensionError);
    EXPECT_THROW(evaluate_accuracy(std::vector<int>{}, std::vector<int>{}), ParameterError);
}

TEST(Evaluate, ArgmaxTakesTheFirstMaximum) {
    auto logits = Tensor<float>::from({3, 3}, {0, 2, 1, 5, 5, 0, -1, -2, -0.5f});
    EXPECT_EQ(argmax_rows(logits), (std::vector<int>{1, 0, 2}));
}

TEST(Summarize, MeanAndStandardError) {
    const std::vector<double> v{0.70, 0.72, 0.68, 0.75, 0.71};
    const Summary s = summarize(v);
    EXPECT_EQ(s.n, 5u);
    EXPECT_NEAR(s.mean, 0.712, 1e-15);
    // sample variance 0.00067, se = sqrt(0.00067 / 5)
    ASSERT_TRUE(s.std_error.has_value());
    EXPECT_NEAR(*s.std_error, std::sqrt(0.00067 / 5.0), 1e-12);
    EXPECT_FALSE(summarize(std::vector<double>{0.5}).std_error.has_value());
}

TEST(Metrics, CsvRowsLeaveAbsentLossesEmpty) {
    EpochMetrics m;
    m.epoch = 3;
    m.step = 30;
    m.lr = 0.025;
    m.loss_total = -0.5;
    m.loss_si = -0.5;
    EXPECT_EQ(metrics_row(m), "3,30,0.025,-0.5,-0.5,,train,");
    const auto back = epoch_metrics_from(to_json(m));
    EXPECT_EQ(metrics_row(back), metrics_row(m));
}
