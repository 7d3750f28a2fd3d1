// Pre-train a tiny SidAE on synthetic images for a few epochs, then compare a
// frozen linear probe on its features against one on an untrained encoder.
#include <cstdio>

#include "sidae/commands.hpp"

using namespace sidae;

int main(int argc, char** argv) {
    const std::size_t epochs = argc > 1 ? std::stoul(argv[1]) : 5;
    ExperimentConfig cfg = desk_config(ModelKind::sidae);
    cfg.pretrain.epochs = epochs;
    const DataBundle data = load_data(cfg);
    std::printf("pool %zu, train %zu, test %zu images of %zux%zu\n", data.pretrain.count, data.train.count,
                data.test.count, cfg.image_size, cfg.image_size);

    const PretrainConfig pc = cfg.pretrain_config(0);
    const EncoderConfig enc = cfg.encoder();
    Model<float> model(cfg.model, enc, pc.seed);
    const auto run = pretrain(model, data.pretrain, pc);
    for (const auto& m : run.history)
        std::printf("epoch %2zu  loss %.4f  (si %.4f, dae %.4f)\n", m.epoch, m.loss_total, *m.loss_si, *m.loss_dae);

    ProbeConfig probe_cfg;
    probe_cfg.mode = cfg.probe_mode;
    probe_cfg.input = cfg.probe_input;
    probe_cfg.optimizer = cfg.probe;
    probe_cfg.seed = pc.seed;
    const auto subset = subset_indices(data.train, cfg.labeled_fraction, cfg.subset_seed);
    Model<float> untrained(cfg.model, enc, pc.seed);
    const double base = probe(untrained, data.train, subset, data.test, probe_cfg).test_accuracy;
    const double acc = probe(model, data.train, subset, data.test, probe_cfg).test_accuracy;
    std::printf("frozen probe on %zu labels: untrained %.3f, pre-trained %.3f\n", subset.indices.size(), base, acc);
}
