#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sidae/cli.hpp"

using namespace sidae;
namespace fs = std::filesystem;

namespace {

class TempDir {
   public:
    explicit TempDir(const std::string& tag) : path_(fs::temp_directory_path() / ("sidae_cli_" + tag)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }
    std::string str(const std::string& leaf) const { return (path_ / leaf).string(); }

   private:
    fs::path path_;
};

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    std::ostringstream out, err;
    const int code = run_cli(std::move(args), out, err);
    return {code, out.str(), err.str()};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::trunc) << s; }

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) rows.push_back(split_csv(line));
    return rows;
}

}  // namespace

TEST(Config, DefaultsAreTheFullScaleProtocol) {
    const ExperimentConfig c;
    EXPECT_EQ(c.model, ModelKind::sidae);
    EXPECT_EQ(c.dataset, DatasetKind::cifar10);
    EXPECT_EQ(c.d_hid, 2048u);
    EXPECT_EQ(c.w, 0.5);
    EXPECT_EQ(c.seeds.size(), 5u);
    EXPECT_EQ(c.pretrain.epochs, 200u);
    std::size_t checkpoints = 0;
    for (std::size_t e = 1; e <= c.pretrain.epochs; ++e)
        checkpoints += is_checkpoint_epoch(e, c.checkpoint_interval, c.pretrain.epochs);
    EXPECT_EQ(checkpoints, 8u);
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
    for (const auto& c : {ExperimentConfig{}, desk_config(ModelKind::dae)}) {
        const auto j = config_json(c);
        EXPECT_EQ(config_json(parse_config(nlohmann::json::parse(j.dump()))), j);
    }
}

TEST(Config, StrictParsing) {
    auto expect_error = [](const std::string& text, const std::string& fragment) {
        try {
            parse_config(nlohmann::json::parse(text));
            ADD_FAILURE() << "accepted " << text;
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
        }
    };
    expect_error(R"({"losses": {"w": 0.5, "weight": 1}})", "losses.weight");
    expect_error(R"({"trainin": {}})", "trainin");
    expect_error(R"({"models": {"d_hid": "wide"}})", "models.d_hid");
    expect_error(R"({"experiment": {"model": "byol"}})", "sidae|simsiam|dae|supervised");
    expect_error(R"({"training": {"probe": {"lr": 0.1, "nesterov": true}}})", "training.probe.nesterov");
    expect_error(R"({"augmentation": {"crop_scale": [0.2]}})", "crop_scale");
    const auto c = parse_config(nlohmann::json::parse(R"({"losses": {"w": 0.25}, "models": {"d_hid": 512}})"));
    EXPECT_EQ(c.w, 0.25);
    EXPECT_EQ(c.d_hid, 512u);
    EXPECT_EQ(c.pretrain.epochs, 200u);
}

TEST(Config, ValidationNamesTheField) {
    ExperimentConfig c;
    c.w = 1.5;
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("losses.w"), std::string::npos);
    }
    c = ExperimentConfig{};
    c.d_hid = 30;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ExperimentConfig{};
    c.pretrain.lr = -1;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Cli, ExitCodes) {
    TempDir dir("codes");
    EXPECT_EQ(cli({}).code, kExitInvalidConfig);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
    EXPECT_EQ(cli({"pretrain", "--w", "2"}).code, kExitInvalidConfig);
    EXPECT_EQ(cli({"pretrain", "--model", "byol"}).code, kExitInvalidConfig);
    EXPECT_EQ(cli({"pretrain", "--no-such-flag"}).code, kExitInvalidConfig);
    EXPECT_EQ(cli({"pretrain", "--preset", "tiny"}).code, kExitInvalidConfig);
    EXPECT_EQ(cli({"pretrain", "--preset", "desk", "--config", "desk.json"}).code, kExitInvalidConfig);
    EXPECT_EQ(resolve_config(std::nullopt, Overrides{.preset = "full"}).d_hid, 2048u);
    EXPECT_EQ(config_json(resolve_config(std::nullopt, Overrides{.preset = "desk"})), config_json(desk_config()));

    write_text(dir.path() / "bad.json", R"({"losses": {"w": 0.5, "lambda": 1}})");
    const auto bad = cli({"pretrain", "--config", dir.str("bad.json")});
    EXPECT_EQ(bad.code, kExitInvalidConfig);
    EXPECT_NE(bad.err.find("losses.lambda"), std::string::npos) << bad.err;
    EXPECT_EQ(cli({"pretrain", "--config", dir.str("absent.json")}).code, kExitInvalidConfig);

    const auto missing = cli({"pretrain", "--dataset", "cifar10", "--data-root", dir.str("nodata"), "--out-dir",
                              dir.str("run")});
    EXPECT_EQ(missing.code, kExitMissingData);
    EXPECT_NE(missing.err.find("data_batch_1.bin"), std::string::npos) << missing.err;

    EXPECT_EQ(cli({"probe", dir.str("no_run")}).code, kExitMissingCheckpoint);
    EXPECT_EQ(cli({"report", dir.str("none.csv")}).code, kExitMissingData);
    write_text(dir.path() / "wrong.csv", "model,accuracy\nsidae,0.5\n");
    EXPECT_EQ(cli({"report", dir.str("wrong.csv"), "--out-dir", dir.str("rep")}).code, kExitInconsistentSchema);
}

TEST(Cli, DeskPipelineEndToEnd) {
    TempDir dir("pipeline");
    const auto t0 = std::chrono::steady_clock::now();
    const auto pre = cli({"pretrain", "--preset", "desk", "--model", "simsiam", "--epochs", "2", "--seed", "3",
                          "--out-dir", dir.str("run")});
    ASSERT_EQ(pre.code, kExitOk) << pre.err;
    const auto ck = read_checkpoint(checkpoint_path(dir.path() / "run" / "seed_3", 2));
    for (const auto& e : ck.entries) EXPECT_EQ(e.name.rfind("decoder.", 0), std::string::npos) << e.name;
    EXPECT_TRUE(ck.find("predictor.fc1.weight"));
    EXPECT_TRUE(fs::exists(dir.path() / "run" / "config.json"));
    EXPECT_TRUE(fs::exists(dir.path() / "run" / "seed_3" / "metrics.csv"));

    const auto missing = cli({"probe", dir.str("run"), "--at-epoch", "1"});
    EXPECT_EQ(missing.code, kExitMissingCheckpoint);
    EXPECT_NE(missing.err.find("available epochs: 2"), std::string::npos) << missing.err;

    const auto probe = cli({"probe", dir.str("run"), "--at-epoch", "0,2"});
    ASSERT_EQ(probe.code, kExitOk) << probe.err;
    const auto rows = read_csv(dir.path() / "run" / "results.csv");
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].size(), 9u);
    EXPECT_EQ(rows[1][6], "0");
    EXPECT_EQ(rows[2][6], "2");
    EXPECT_EQ(rows[2][4], "");  // w is blank for simsiam
    // 1% of 8192 labeled images.
    EXPECT_EQ(load_subset(dir.path() / "run" / "subset_0.01.txt").indices.size(), 82u);

    const auto rep = cli({"report", dir.str("run/results.csv"), "--out-dir", dir.str("report")});
    ASSERT_EQ(rep.code, kExitOk) << rep.err;
    EXPECT_TRUE(fs::exists(dir.path() / "report" / "table_models.csv"));
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 60.0);
}

TEST(Cli, SyntheticTinyRunIsQuick) {
    TempDir dir("quick");
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = cli({"pretrain", "--dataset", "synthetic", "--backbone", "tiny", "--epochs", "5", "--seed", "0",
                        "--out-dir", dir.str("run")});
    ASSERT_EQ(r.code, kExitOk) << r.err;
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 60.0);
    EXPECT_EQ(available_epochs(dir.path() / "run" / "seed_0"), (std::vector<std::size_t>{5}));
}

TEST(Report, MatchesAnIndependentAggregation) {
    TempDir dir("report");
    const std::vector<double> sidae{0.7312, 0.7401, 0.7288, 0.7356, 0.7330};
    const std::vector<double> dae{0.6012, 0.6120};
    std::ostringstream csv;
    csv << kResultsHeader << '\n';
    for (std::size_t s = 0; s < sidae.size(); ++s) csv << "sidae,cifar10,0.01,frozen,0.5,2048,200," << s << ',' << sidae[s] << '\n';
    for (std::size_t s = 0; s < sidae.size(); ++s) csv << "sidae,cifar10,0.01,frozen,0.5,2048,100," << s << ",0.5\n";
    for (std::size_t s = 0; s < dae.size(); ++s) csv << "dae,cifar10,0.01,frozen,,2048,200," << s << ',' << dae[s] << '\n';
    csv << "sidae,cifar10,0.01,frozen,0.25,2048,200,0,0.7\n";
    write_text(dir.path() / "a.csv", csv.str());
    const auto files = cmd_report({dir.path() / "a.csv"}, dir.path() / "out", *new std::ostringstream);

    // Spreadsheet-style: AVERAGE and STDEV.S / SQRT(n).
    auto average = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    auto stderr_of = [&](const std::vector<double>& v) {
        const double m = average(v);
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::sqrt(ss / (v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
    };

    const auto models = read_csv(files.models);
    ASSERT_EQ(models[0].size(), 10u);
    bool seen_sidae = false, seen_dae = false, seen_single = false;
    for (std::size_t i = 1; i < models.size(); ++i) {
        const auto& r = models[i];
        if (r[0] == "sidae" && r[4] == "0.5") {
            seen_sidae = true;
            EXPECT_EQ(r[6], "200");
            EXPECT_EQ(r[7], "5");
            EXPECT_NEAR(std::stod(r[8]), average(sidae), 1e-9);
            EXPECT_NEAR(std::stod(r[9]), stderr_of(sidae), 1e-9);
        } else if (r[0] == "dae") {
            seen_dae = true;
            EXPECT_NEAR(std::stod(r[8]), average(dae), 1e-9);
            EXPECT_NEAR(std::stod(r[9]), stderr_of(dae), 1e-9);
        } else if (r[0] == "sidae" && r[4] == "0.25") {
            seen_single = true;
            EXPECT_EQ(r[9], "");  // one seed: no standard error
        }
    }
    EXPECT_TRUE(seen_sidae && seen_dae && seen_single);

    const auto series = read_csv(files.epochs);
    EXPECT_EQ(series.size(), 1u + 4u);  // sidae@100, sidae@200, dae@200, sidae w=0.25@200
    const auto wtab = read_csv(files.w_sweep);
    ASSERT_EQ(wtab.size(), 3u);
    EXPECT_EQ(wtab[1][4], "0.25");
    EXPECT_EQ(wtab[2][4], "0.5");
}

TEST(Report, RejectsMalformedRows) {
    TempDir dir("report_bad");
    write_text(dir.path() / "short.csv", std::string(kResultsHeader) + "\nsidae,cifar10,0.01\n");
    EXPECT_THROW(cmd_report({dir.path() / "short.csv"}, dir.path() / "o", *new std::ostringstream), ConsistencyError);
    write_text(dir.path() / "nan.csv", std::string(kResultsHeader) + "\nsidae,cifar10,x,frozen,0.5,64,20,0,0.9\n");
    EXPECT_THROW(cmd_report({dir.path() / "nan.csv"}, dir.path() / "o", *new std::ostringstream), ConsistencyError);
    EXPECT_THROW(cmd_report({}, dir.path() / "o"), ConfigError);
}

TEST(Gradcheck, CleanSuitePasses) {
    std::ostringstream out;
    EXPECT_EQ(cmd_gradcheck(out), kExitOk);
    EXPECT_NE(out.str().find("gradient suite passed"), std::string::npos);
}

TEST(Gradcheck, CorruptedReluIsNamed) {
    // relu whose backward lets gradient through negative inputs.
    auto broken_relu = [](const Tensor<double>& x) {
        std::vector<double> out(x.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x.data()[i], 0.0);
        return record<double>("relu", x.shape(), std::move(out), {x}, [x](const TensorImpl<double>& o) {
            if (double* g = x.impl()->grad_slot())
                for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
        });
    };
    auto cases = default_grad_cases();
    for (auto& c : cases) {
        if (c.name != "relu") continue;
        c.trial = [broken_relu](SeededRng& rng) {
            const Shape s{3, 4};
            auto w = random_tensor(s, rng);
            return check_inputs([&](const std::vector<Tensor<double>>& a) { return weighted_sum(broken_relu(a[0]), w); },
                                {off_kink_tensor(s, rng)});
        };
    }
    std::ostringstream out;
    EXPECT_EQ(cmd_gradcheck(out, cases), kExitFailure);
    const std::string text = out.str();
    EXPECT_NE(text.find("FAIL relu"), std::string::npos) << text;
    EXPECT_NE(text.find("at coordinate"), std::string::npos);
    EXPECT_NE(text.find("analytic="), std::string::npos);
    EXPECT_NE(text.find("gradient suite FAILED"), std::string::npos);
    EXPECT_EQ(text.find("FAIL sigmoid"), std::string::npos);
}
