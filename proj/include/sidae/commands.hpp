#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sidae/config.hpp"
#include "sidae/gradcheck.hpp"

namespace sidae {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,
    kExitInvalidConfig = 2,
    kExitMissingData = 3,
    kExitMissingCheckpoint = 4,
    kExitInconsistentSchema = 5,
};

class MissingCheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct DataBundle {
    Dataset pretrain;  // split used for self-supervised training
    Dataset train;     // labeled split the probe subset is drawn from
    Dataset test;
};

inline Dataset resize_dataset(Dataset ds, std::size_t size) {
    if (ds.height == size && ds.width == size) return ds;
    Dataset out = ds;
    out.height = out.width = size;
    out.images.assign(out.count * out.image_numel(), 0.0f);
    for (std::size_t i = 0; i < ds.count; ++i) {
        const Image r = resize_bilinear(ds.image(i), size, size);
        std::copy(r.data.begin(), r.data.end(), out.images.begin() + static_cast<std::ptrdiff_t>(i * out.image_numel()));
    }
    return out;
}

inline DataBundle load_data(const ExperimentConfig& cfg) {
    const std::filesystem::path root = cfg.data_root;
    const std::size_t size = cfg.image_size;
    DataBundle b;
    switch (cfg.dataset) {
        case DatasetKind::synthetic: {
            b.train = synthetic_dataset(cfg.synthetic.options(size, Split::train));
            b.test = synthetic_dataset(cfg.synthetic.options(size, Split::test));
            b.pretrain = cfg.synthetic.pool_per_class == 0
                             ? b.train
                             : synthetic_dataset(cfg.synthetic.options(size, Split::unlabeled));
            return b;
        }
        case DatasetKind::cifar10:
            b.train = resize_dataset(load_cifar10(root, Split::train), size);
            b.test = resize_dataset(load_cifar10(root, Split::test), size);
            b.pretrain = b.train;
            return b;
        case DatasetKind::mnist:
        case DatasetKind::fashion_mnist: {
            const std::string name = to_string(cfg.dataset);
            b.train = load_idx(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte", name, Split::train, size);
            b.test = load_idx(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte", name, Split::test, size);
            b.pretrain = b.train;
            return b;
        }
        case DatasetKind::stl10:
            b.train = load_stl10(root, Split::train, size);
            b.test = load_stl10(root, Split::test, size);
            b.pretrain = load_stl10(root, Split::unlabeled, size);
            return b;
    }
    throw ConfigError("unknown dataset");
}

inline std::filesystem::path seed_dir(const std::filesystem::path& run_dir, std::uint64_t seed) {
    return run_dir / ("seed_" + std::to_string(seed));
}

/// Runs `job(seed)` for every seed, at most `parallel` at a time. The first
/// exception (in seed order) is rethrown after all jobs finish.
template <typename Job>
void for_each_seed(const std::vector<std::uint64_t>& seeds, std::size_t parallel, Job job) {
    std::vector<std::exception_ptr> errors(seeds.size());
    for (std::size_t start = 0; start < seeds.size(); start += parallel) {
        std::vector<std::thread> pool;
        const std::size_t end = std::min(seeds.size(), start + parallel);
        for (std::size_t i = start; i < end; ++i) {
            auto run = [&, i] {
                try {
                    job(seeds[i]);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            };
            if (parallel == 1) {
                run();
            } else {
                pool.emplace_back(run);
            }
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline void write_config_echo(const ExperimentConfig& cfg, const std::filesystem::path& run_dir) {
    std::filesystem::create_directories(run_dir);
    std::ofstream out(run_dir / "config.json", std::ios::trunc);
    out << config_json(cfg).dump(2) << '\n';
}

/// Pre-trains one model per seed under cfg.out_dir; returns the run directory.
inline std::filesystem::path cmd_pretrain(const ExperimentConfig& cfg, std::ostream& log = std::cout) {
    cfg.validate();
    const std::filesystem::path run_dir = cfg.out_dir;
    const DataBundle data = load_data(cfg);
    write_config_echo(cfg, run_dir);
    if (cfg.model == ModelKind::supervised) {
        log << "supervised baseline has no pre-training; run `probe` on " << run_dir.string() << '\n';
        return run_dir;
    }
    std::mutex log_mutex;
    for_each_seed(cfg.seeds, cfg.seeds_parallel, [&](std::uint64_t seed) {
        Model<float> model(cfg.model, cfg.encoder(), seed);
        PretrainOptions opts;
        opts.run_dir = seed_dir(run_dir, seed);
        auto result = pretrain(model, data.pretrain, cfg.pretrain_config(seed), opts);
        std::lock_guard lock(log_mutex);
        const auto& last = result.history.back();
        log << to_string(cfg.model) << " seed " << seed << ": " << result.checkpoints.size()
            << " checkpoints, final loss " << format_number(last.loss_total) << '\n';
    });
    return run_dir;
}

inline constexpr const char* kResultsHeader = "model,dataset,fraction,mode,w,d_hid,pretrain_epochs,seed,accuracy";

struct ResultRow {
    std::string model, dataset;
    double fraction = 0.0;
    std::string mode;
    std::optional<double> w;
    std::size_t d_hid = 0;
    std::size_t pretrain_epochs = 0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
};

inline std::string result_line(const ResultRow& r) {
    return r.model + "," + r.dataset + "," + format_number(r.fraction) + "," + r.mode + "," +
           (r.w ? format_number(*r.w) : std::string()) + "," + std::to_string(r.d_hid) + "," +
           std::to_string(r.pretrain_epochs) + "," + std::to_string(r.seed) + "," + format_number(r.accuracy);
}

/// Checkpoint epochs present for one seed, ascending.
inline std::vector<std::size_t> available_epochs(const std::filesystem::path& dir) {
    std::vector<std::size_t> out;
    const auto ck = dir / "checkpoints";
    if (!std::filesystem::exists(ck)) return out;
    for (const auto& e : std::filesystem::directory_iterator(ck)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("epoch_", 0) == 0 && e.path().extension() == ".ckpt") {
            out.push_back(std::stoul(name.substr(6, name.size() - 11)));
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

struct ProbeRequest {
    std::optional<double> fraction;
    std::optional<ProbeMode> mode;
    std::string at_epoch = "last";  // "all", "last", or comma-separated epochs (0 = random init)
    std::optional<std::vector<std::uint64_t>> seeds;
    std::size_t seeds_parallel = 1;
};

inline std::vector<std::size_t> resolve_epochs(const std::string& spec, const std::vector<std::size_t>& available,
                                               const std::filesystem::path& dir) {
    auto listing = [&available] {
        std::string s;
        for (auto e : available) s += (s.empty() ? "" : ", ") + std::to_string(e);
        return s.empty() ? std::string("none") : s;
    };
    if (spec == "all") {
        if (available.empty()) throw MissingCheckpointError("no checkpoints in " + dir.string());
        return available;
    }
    if (spec == "last") {
        if (available.empty()) throw MissingCheckpointError("no checkpoints in " + dir.string());
        return {available.back()};
    }
    std::vector<std::size_t> out;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        std::size_t e = 0;
        try {
            e = std::stoul(tok);
        } catch (const std::exception&) {
            throw ConfigError("--at-epoch: '" + tok + "' is not an epoch, 'all' or 'last'");
        }
        if (e != 0 && std::find(available.begin(), available.end(), e) == available.end()) {
            throw MissingCheckpointError("no checkpoint for epoch " + std::to_string(e) + " in " + dir.string() +
                                         "; available epochs: " + listing());
        }
        out.push_back(e);
    }
    return out;
}

/// Probes the checkpoints of a pre-training run and appends rows to
/// run_dir/results.csv; returns that path.
inline std::filesystem::path cmd_probe(const std::filesystem::path& run_dir, const ProbeRequest& req,
                                       std::ostream& log = std::cout) {
    if (!std::filesystem::exists(run_dir / "config.json")) {
        throw MissingCheckpointError("no run at " + run_dir.string() + " (config.json missing)");
    }
    ExperimentConfig cfg = load_config(run_dir / "config.json");
    if (req.fraction) cfg.labeled_fraction = *req.fraction;
    if (req.mode) cfg.probe_mode = *req.mode;
    cfg.validate();
    const auto seeds = req.seeds.value_or(cfg.seeds);
    const DataBundle data = load_data(cfg);
    const SubsetSpec subset = subset_indices(data.train, cfg.labeled_fraction, cfg.subset_seed);
    save_subset(subset, run_dir / ("subset_" + format_number(cfg.labeled_fraction) + ".txt"));

    // Resolve every (seed, epoch) before any training so a bad request fails fast.
    std::map<std::uint64_t, std::vector<std::size_t>> plan;
    for (auto seed : seeds) {
        plan[seed] = cfg.model == ModelKind::supervised
                         ? std::vector<std::size_t>{0}
                         : resolve_epochs(req.at_epoch, available_epochs(seed_dir(run_dir, seed)), seed_dir(run_dir, seed));
    }

    std::vector<ResultRow> rows;
    std::mutex mutex;
    for_each_seed(seeds, req.seeds_parallel, [&](std::uint64_t seed) {
        for (auto epoch : plan.at(seed)) {
            ProbeConfig pc;
            pc.mode = cfg.probe_mode;
            pc.input = cfg.probe_input;
            pc.optimizer = cfg.probe;
            pc.seed = seed;
            ProbeResult r;
            if (cfg.model == ModelKind::supervised) {
                r = supervised_baseline<float>(cfg.encoder(), data.train, subset, data.test, pc);
            } else {
                Model<float> model(cfg.model, cfg.encoder(), seed);
                if (epoch > 0) restore_checkpoint(model, read_checkpoint(checkpoint_path(seed_dir(run_dir, seed), epoch)));
                r = probe(model, data.train, subset, data.test, pc);
            }
            ResultRow row{to_string(cfg.model), to_string(cfg.dataset), cfg.labeled_fraction, to_string(cfg.probe_mode),
                          cfg.model == ModelKind::sidae ? std::optional<double>(cfg.w) : std::nullopt,
                          cfg.d_hid, epoch, seed, r.test_accuracy};
            std::lock_guard lock(mutex);
            log << result_line(row) << '\n';
            rows.push_back(row);
        }
    });
    std::sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
        return std::tie(a.seed, a.pretrain_epochs) < std::tie(b.seed, b.pretrain_epochs);
    });
    const auto path = run_dir / "results.csv";
    const bool fresh = !std::filesystem::exists(path);
    std::ofstream out(path, std::ios::app);
    if (fresh) out << kResultsHeader << '\n';
    for (const auto& r : rows) out << result_line(r) << '\n';
    return path;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(line);
    while (std::getline(ss, cur, ',')) out.push_back(cur);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::vector<ResultRow> read_results(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingDataError("cannot open results file " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kResultsHeader) {
        throw ConsistencyError(path.string() + ": header is '" + line + "', expected '" + kResultsHeader + "'");
    }
    std::vector<ResultRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = split_csv(line);
        if (f.size() != 9) {
            throw ConsistencyError(path.string() + ":" + std::to_string(lineno) + ": expected 9 fields, found " +
                                   std::to_string(f.size()));
        }
        try {
            ResultRow r{f[0], f[1], std::stod(f[2]), f[3],
                        f[4].empty() ? std::nullopt : std::optional<double>(std::stod(f[4])),
                        std::stoul(f[5]), std::stoul(f[6]), std::stoull(f[7]), std::stod(f[8])};
            rows.push_back(r);
        } catch (const std::logic_error&) {
            throw ConsistencyError(path.string() + ":" + std::to_string(lineno) + ": malformed field");
        }
    }
    return rows;
}

struct ReportFiles {
    std::filesystem::path models, epochs, w_sweep;
};

inline std::string stderr_text(const Summary& s) { return s.std_error ? format_number(*s.std_error) : std::string(); }

/// Aggregates result rows into three plot-ready tables (mean and standard
/// error over seeds): final-epoch accuracy per model, accuracy against
/// pre-training epochs, and the w sweep.
inline ReportFiles cmd_report(const std::vector<std::filesystem::path>& inputs, const std::filesystem::path& out_dir,
                              std::ostream& log = std::cout) {
    if (inputs.empty()) throw ConfigError("report: at least one results file is required");
    std::vector<ResultRow> rows;
    for (const auto& p : inputs) {
        auto r = read_results(p);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    std::filesystem::create_directories(out_dir);
    auto w_key = [](const ResultRow& r) { return r.w ? format_number(*r.w) : std::string(); };
    using Key = std::vector<std::string>;
    auto base_key = [&](const ResultRow& r) {
        return Key{r.model, r.dataset, format_number(r.fraction), r.mode, w_key(r), std::to_string(r.d_hid)};
    };

    // Accuracy against pre-training epochs.
    std::map<std::pair<Key, std::size_t>, std::vector<double>> by_epoch;
    std::map<Key, std::size_t> last_epoch;
    for (const auto& r : rows) {
        by_epoch[{base_key(r), r.pretrain_epochs}].push_back(r.accuracy);
        auto& e = last_epoch[base_key(r)];
        e = std::max(e, r.pretrain_epochs);
    }
    ReportFiles files{out_dir / "table_models.csv", out_dir / "series_epochs.csv", out_dir / "table_w.csv"};
    std::ofstream series(files.epochs), models(files.models), wtab(files.w_sweep);
    series << "model,dataset,fraction,mode,w,d_hid,pretrain_epochs,n,mean,stderr\n";
    models << "model,dataset,fraction,mode,w,d_hid,pretrain_epochs,n,mean,stderr\n";
    wtab << "dataset,fraction,mode,d_hid,w,pretrain_epochs,n,mean,stderr\n";
    log << "model      dataset        fraction  mode      w      epochs  n  accuracy\n";
    for (const auto& [k, values] : by_epoch) {
        const Summary s = summarize(values);
        const std::string common = k.first[0] + "," + k.first[1] + "," + k.first[2] + "," + k.first[3] + "," +
                                   k.first[4] + "," + k.first[5] + "," + std::to_string(k.second) + "," +
                                   std::to_string(s.n) + "," + format_number(s.mean) + "," + stderr_text(s);
        series << common << '\n';
        if (k.second != last_epoch.at(k.first)) continue;
        models << common << '\n';
        if (k.first[0] == "sidae") {
            wtab << k.first[1] << ',' << k.first[2] << ',' << k.first[3] << ',' << k.first[5] << ',' << k.first[4]
                 << ',' << k.second << ',' << s.n << ',' << format_number(s.mean) << ',' << stderr_text(s) << '\n';
        }
        char buf[200];
        std::snprintf(buf, sizeof buf, "%-10s %-14s %-9s %-9s %-6s %-7zu %-2zu %.2f%s", k.first[0].c_str(),
                      k.first[1].c_str(), k.first[2].c_str(), k.first[3].c_str(), k.first[4].c_str(), k.second, s.n,
                      100.0 * s.mean,
                      s.std_error ? (" (" + format_number(100.0 * *s.std_error) + ")").c_str() : "");
        log << buf << '\n';
    }
    return files;
}

/// Runs the gradient suite and prints one line per case; returns the exit code.
inline int cmd_gradcheck(std::ostream& log = std::cout, const std::vector<GradCase>& cases = default_grad_cases(),
                         std::size_t trials = kGradTrials) {
    const auto report = run_grad_suite(cases, trials);
    for (const auto& c : report.cases) {
        char buf[256];
        if (!c.error.empty()) {
            log << "FAIL " << c.name << ": " << c.error << '\n';
            continue;
        }
        std::snprintf(buf, sizeof buf, "%s %-22s trials=%zu max_rel_error=%.3e", c.passed ? "PASS" : "FAIL",
                      c.name.c_str(), c.trials, c.worst.max_rel_error);
        log << buf;
        if (!c.passed) {
            std::snprintf(buf, sizeof buf, " at coordinate %zu: analytic=%.10g numeric=%.10g", c.worst.index,
                          c.worst.analytic, c.worst.numeric);
            log << buf;
        }
        log << '\n';
    }
    log << (report.passed() ? "gradient suite passed" : "gradient suite FAILED") << " in " << format_number(report.seconds)
        << " s\n";
    return report.passed() ? kExitOk : kExitFailure;
}

}  // namespace sidae
