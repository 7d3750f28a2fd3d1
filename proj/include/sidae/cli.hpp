#pragma once

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sidae/commands.hpp"

namespace sidae {

/// Command-line values that override a loaded configuration.
struct Overrides {
    std::optional<std::string> preset, model, dataset, backbone, out_dir, data_root;
    std::optional<double> w;
    std::optional<std::size_t> d_hid, epochs, image_size, seeds_parallel;
    std::optional<std::uint64_t> seed;
};

namespace detail {

template <typename E>
E parse_name(const std::string& flag, const std::string& value, std::initializer_list<std::pair<const char*, E>> names) {
    for (const auto& [n, v] : names)
        if (value == n) return v;
    std::string allowed;
    for (const auto& [n, v] : names) allowed += std::string(allowed.empty() ? "" : "|") + n;
    throw ConfigError(flag + ": '" + value + "' is not one of " + allowed);
}

}  // namespace detail

inline ExperimentConfig resolve_config(const std::optional<std::string>& path, const Overrides& o) {
    if (path && o.preset) throw ConfigError("--config and --preset are exclusive");
    ExperimentConfig c;
    if (path) {
        c = load_config(*path);
    } else if (o.preset) {
        if (*o.preset == "desk") {
            c = desk_config();
        } else if (*o.preset != "full") {
            throw ConfigError("--preset: '" + *o.preset + "' is not one of full|desk");
        }
    }
    if (o.model) {
        c.model = detail::parse_name("--model", *o.model, kModelNames);
        if (o.preset && *o.preset == "desk" && !o.out_dir) c.out_dir = "runs/desk_" + *o.model;
    }
    if (o.dataset) c.dataset = detail::parse_name("--dataset", *o.dataset, kDatasetNames);
    if (o.backbone) {
        c.backbone = detail::parse_name<BackboneKind>(
            "--backbone", *o.backbone, {{"resnet18_cifar", BackboneKind::resnet18_cifar}, {"tiny", BackboneKind::tiny}});
    }
    if (o.w) c.w = *o.w;
    if (o.d_hid) c.d_hid = *o.d_hid;
    if (o.epochs) c.pretrain.epochs = *o.epochs;
    if (o.image_size) c.image_size = *o.image_size;
    if (o.seeds_parallel) c.seeds_parallel = *o.seeds_parallel;
    if (o.seed) c.seeds = {*o.seed};
    if (o.out_dir) c.out_dir = *o.out_dir;
    if (o.data_root) c.data_root = *o.data_root;
    c.validate();
    return c;
}

inline int exit_code_for(std::exception_ptr e, std::ostream& err) {
    try {
        std::rethrow_exception(e);
    } catch (const ConfigError& x) {
        err << "invalid configuration: " << x.what() << '\n';
        return kExitInvalidConfig;
    } catch (const std::invalid_argument& x) {
        err << "invalid configuration: " << x.what() << '\n';
        return kExitInvalidConfig;
    } catch (const MissingCheckpointError& x) {
        err << "missing checkpoint: " << x.what() << '\n';
        return kExitMissingCheckpoint;
    } catch (const ConsistencyError& x) {
        err << "inconsistent input: " << x.what() << '\n';
        return kExitInconsistentSchema;
    } catch (const MissingDataError& x) {
        err << "missing data: " << x.what() << '\n';
        return kExitMissingData;
    } catch (const FormatError& x) {
        err << "malformed data: " << x.what() << '\n';
        return kExitMissingData;
    } catch (const std::exception& x) {
        err << "error: " << x.what() << '\n';
        return kExitFailure;
    }
}

/// Entry point behind the `sidae` executable; `args` excludes the program name.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"SidAE / SimSiam / DAE pre-training and probing", "sidae"};
    app.require_subcommand(1);

    std::optional<std::string> config_path;
    Overrides o;
    auto* pre = app.add_subcommand("pretrain", "pre-train one model per seed");
    pre->add_option("--config", config_path, "JSON configuration");
    pre->add_option("--preset", o.preset, "start from a built-in configuration: full|desk");
    pre->add_option("--model", o.model, "sidae|simsiam|dae|supervised");
    pre->add_option("--dataset", o.dataset, "cifar10|mnist|fashion_mnist|stl10|synthetic");
    pre->add_option("--backbone", o.backbone, "resnet18_cifar|tiny");
    pre->add_option("--w", o.w, "reconstruction weight in [0, 1]");
    pre->add_option("--d-hid", o.d_hid, "latent width");
    pre->add_option("--epochs", o.epochs, "pre-training epochs");
    pre->add_option("--image-size", o.image_size, "input side length");
    pre->add_option("--seed", o.seed, "run a single seed");
    pre->add_option("--seeds-parallel", o.seeds_parallel, "seeds trained concurrently");
    pre->add_option("--out-dir", o.out_dir, "run directory");
    pre->add_option("--data-root", o.data_root, "dataset directory");

    std::string run_dir;
    ProbeRequest req;
    std::optional<double> fraction;
    std::optional<std::string> mode;
    std::optional<std::uint64_t> probe_seed;
    auto* prb = app.add_subcommand("probe", "train linear probes on a run's checkpoints");
    prb->add_option("run_dir", run_dir, "directory written by `pretrain`")->required();
    prb->add_option("--fraction", fraction, "labeled fraction in (0, 1]");
    prb->add_option("--mode", mode, "frozen|finetune");
    prb->add_option("--at-epoch", req.at_epoch, "all|last|comma-separated epochs (0 = random init)");
    prb->add_option("--seed", probe_seed, "probe a single seed");
    prb->add_option("--seeds-parallel", req.seeds_parallel, "seeds probed concurrently");

    std::vector<std::string> inputs;
    std::string report_dir = "report";
    auto* rep = app.add_subcommand("report", "aggregate results files into tables");
    rep->add_option("results", inputs, "results.csv files")->required();
    rep->add_option("--out-dir", report_dir, "output directory");

    std::size_t trials = kGradTrials;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op and loss");
    grad->add_option("--trials", trials, "randomized trials per case");

    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitInvalidConfig;
    }

    try {
        if (*pre) {
            const auto dir = cmd_pretrain(resolve_config(config_path, o), out);
            out << "run directory: " << dir.string() << '\n';
        } else if (*prb) {
            req.fraction = fraction;
            if (mode) {
                req.mode = detail::parse_name<ProbeMode>("--mode", *mode,
                                                         {{"frozen", ProbeMode::frozen}, {"finetune", ProbeMode::finetune}});
            }
            if (probe_seed) req.seeds = std::vector<std::uint64_t>{*probe_seed};
            if (req.seeds_parallel == 0) throw ConfigError("--seeds-parallel: must be positive");
            const auto results = cmd_probe(run_dir, req, out);
            out << "results: " << results.string() << '\n';
        } else if (*rep) {
            const auto files = cmd_report({inputs.begin(), inputs.end()}, report_dir, out);
            out << "tables: " << files.models.string() << ", " << files.epochs.string() << ", "
                << files.w_sweep.string() << '\n';
        } else if (*grad) {
            if (trials == 0) throw ConfigError("--trials: must be positive");
            return cmd_gradcheck(out, default_grad_cases(), trials);
        }
    } catch (...) {
        return exit_code_for(std::current_exception(), err);
    }
    return kExitOk;
}

}  // namespace sidae
