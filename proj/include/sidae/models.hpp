#pragma once

#include <bit>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sidae/nn.hpp"

namespace sidae {

enum class BackboneKind { resnet18_cifar, tiny };
enum class ModelKind { sidae, simsiam, dae, supervised };
enum class ProbeInput { backbone, projector };

inline std::string to_string(BackboneKind k) { return k == BackboneKind::tiny ? "tiny" : "resnet18_cifar"; }
inline std::string to_string(ProbeInput p) { return p == ProbeInput::backbone ? "backbone" : "projector"; }
inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::sidae: return "sidae";
        case ModelKind::simsiam: return "simsiam";
        case ModelKind::dae: return "dae";
        case ModelKind::supervised: return "supervised";
    }
    return "?";
}

struct EncoderConfig {
    BackboneKind backbone = BackboneKind::resnet18_cifar;
    std::size_t d_hid = 2048;
    std::size_t input_channels = 3;
    std::size_t input_size = 32;

    std::size_t feature_dim() const { return backbone == BackboneKind::resnet18_cifar ? 512 : 64; }
    std::size_t predictor_hidden() const { return d_hid / 4; }
    // One stride-2 transposed conv per doubling from 1x1 to input_size.
    std::size_t decoder_layers() const { return static_cast<std::size_t>(std::countr_zero(input_size)); }

    void validate() const {
        if (d_hid == 0 || d_hid % 4 != 0) {
            throw ParameterError("d_hid must be a positive multiple of 4, got " + std::to_string(d_hid));
        }
        if (input_size < 2 || !std::has_single_bit(input_size)) {
            throw ParameterError("input_size must be a power of two >= 2, got " + std::to_string(input_size));
        }
        if (input_channels == 0) throw ParameterError("input_channels must be positive");
    }
};

template <typename T>
class Backbone {
   public:
    virtual ~Backbone() = default;
    virtual Tensor<T> operator()(const Tensor<T>& x, Mode mode) = 0;
    virtual void collect(const std::string& prefix, ParameterList<T>& out) = 0;
    virtual std::size_t feature_dim() const = 0;
};

template <typename T>
class BasicBlock {
   public:
    BasicBlock(std::size_t in, std::size_t out, std::size_t stride, SeededRng& rng)
        : conv1_(in, out, 3, stride, 1, rng), bn1_(out), conv2_(out, out, 3, 1, 1, rng), bn2_(out) {
        if (stride != 1 || in != out) {
            shortcut_conv_ = Conv2d<T>(in, out, 1, stride, 0, rng);
            shortcut_bn_ = BatchNorm<T>(out);
            projected_ = true;
        }
    }

    Tensor<T> operator()(const Tensor<T>& x, Mode mode) {
        auto y = relu(bn1_(conv1_(x), mode));
        y = bn2_(conv2_(y), mode);
        auto skip = projected_ ? shortcut_bn_(shortcut_conv_(x), mode) : x;
        return relu(add(y, skip));
    }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        conv1_.collect(prefix + ".conv1", out);
        bn1_.collect(prefix + ".bn1", out);
        conv2_.collect(prefix + ".conv2", out);
        bn2_.collect(prefix + ".bn2", out);
        if (projected_) {
            shortcut_conv_.collect(prefix + ".shortcut.conv", out);
            shortcut_bn_.collect(prefix + ".shortcut.bn", out);
        }
    }

   private:
    Conv2d<T> conv1_;
    BatchNorm<T> bn1_;
    Conv2d<T> conv2_;
    BatchNorm<T> bn2_;
    Conv2d<T> shortcut_conv_;
    BatchNorm<T> shortcut_bn_;
    bool projected_ = false;
};

/// ResNet-18 with the CIFAR stem: 3x3 stride-1 first conv, no max-pool,
/// stages 64/128/256/512, global average pool.
template <typename T>
class ResNet18Cifar final : public Backbone<T> {
   public:
    ResNet18Cifar(std::size_t in_channels, SeededRng& rng) : stem_(in_channels, 64, 3, 1, 1, rng), stem_bn_(64) {
        const std::size_t widths[] = {64, 128, 256, 512};
        std::size_t in = 64;
        for (std::size_t s = 0; s < 4; ++s) {
            blocks_.emplace_back(in, widths[s], s == 0 ? 1 : 2, rng);
            blocks_.emplace_back(widths[s], widths[s], 1, rng);
            in = widths[s];
        }
    }

    Tensor<T> operator()(const Tensor<T>& x, Mode mode) override {
        auto y = relu(stem_bn_(stem_(x), mode));
        for (auto& b : blocks_) y = b(y, mode);
        return global_avg_pool(y);
    }

    void collect(const std::string& prefix, ParameterList<T>& out) override {
        stem_.collect(prefix + ".stem.conv", out);
        stem_bn_.collect(prefix + ".stem.bn", out);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            blocks_[i].collect(prefix + ".layer" + std::to_string(i / 2 + 1) + "." + std::to_string(i % 2), out);
        }
    }

    std::size_t feature_dim() const override { return 512; }

   private:
    Conv2d<T> stem_;
    BatchNorm<T> stem_bn_;
    std::vector<BasicBlock<T>> blocks_;
};

/// Desk-scale backbone: stem plus two stride-2 conv stages, 64 features.
template <typename T>
class TinyBackbone final : public Backbone<T> {
   public:
    TinyBackbone(std::size_t in_channels, SeededRng& rng)
        : stem_(in_channels, 16, 3, 1, 1, rng),
          stem_bn_(16),
          stage1_(16, 32, 3, 2, 1, rng),
          stage1_bn_(32),
          stage2_(32, 64, 3, 2, 1, rng),
          stage2_bn_(64) {}

    Tensor<T> operator()(const Tensor<T>& x, Mode mode) override {
        auto y = relu(stem_bn_(stem_(x), mode));
        y = relu(stage1_bn_(stage1_(y), mode));
        y = relu(stage2_bn_(stage2_(y), mode));
        return global_avg_pool(y);
    }

    void collect(const std::string& prefix, ParameterList<T>& out) override {
        stem_.collect(prefix + ".stem.conv", out);
        stem_bn_.collect(prefix + ".stem.bn", out);
        stage1_.collect(prefix + ".stage1.conv", out);
        stage1_bn_.collect(prefix + ".stage1.bn", out);
        stage2_.collect(prefix + ".stage2.conv", out);
        stage2_bn_.collect(prefix + ".stage2.bn", out);
    }

    std::size_t feature_dim() const override { return 64; }

   private:
    Conv2d<T> stem_;
    BatchNorm<T> stem_bn_;
    Conv2d<T> stage1_;
    BatchNorm<T> stage1_bn_;
    Conv2d<T> stage2_;
    BatchNorm<T> stage2_bn_;
};

template <typename T>
std::unique_ptr<Backbone<T>> make_backbone(const EncoderConfig& cfg, SeededRng& rng) {
    if (cfg.backbone == BackboneKind::tiny) return std::make_unique<TinyBackbone<T>>(cfg.input_channels, rng);
    return std::make_unique<ResNet18Cifar<T>>(cfg.input_channels, rng);
}

/// Three Linear+BN blocks, ReLU after the first two.
template <typename T>
class Projector {
   public:
    Projector(std::size_t in, std::size_t d_hid, SeededRng& rng) {
        for (std::size_t i = 0; i < 3; ++i) {
            layers_.emplace_back(i == 0 ? in : d_hid, d_hid, rng);
            norms_.emplace_back(d_hid);
        }
    }

    Tensor<T> operator()(const Tensor<T>& h, Mode mode) {
        auto y = h;
        for (std::size_t i = 0; i < 3; ++i) {
            y = norms_[i](layers_[i](y), mode);
            if (i < 2) y = relu(y);
        }
        return y;
    }

    std::size_t blocks() const { return layers_.size(); }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        for (std::size_t i = 0; i < 3; ++i) {
            layers_[i].collect(prefix + ".fc" + std::to_string(i), out);
            norms_[i].collect(prefix + ".bn" + std::to_string(i), out);
        }
    }

   private:
    std::vector<Linear<T>> layers_;
    std::vector<BatchNorm<T>> norms_;
};

template <typename T>
class Encoder {
   public:
    Encoder(const EncoderConfig& cfg, SeededRng& rng)
        : config_(cfg), backbone_(make_backbone<T>(cfg, rng)), projector_(backbone_->feature_dim(), cfg.d_hid, rng) {}

    /// z = projector(backbone(x)), shape (B, d_hid).
    Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return projector_(features(x, mode), mode); }

    /// Backbone features with the projector removed, shape (B, feature_dim).
    Tensor<T> features(const Tensor<T>& x, Mode mode) {
        check_input(x);
        return (*backbone_)(x, mode);
    }

    Backbone<T>& backbone() { return *backbone_; }
    Projector<T>& projector() { return projector_; }
    const EncoderConfig& config() const { return config_; }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        backbone_->collect(prefix + ".backbone", out);
        projector_.collect(prefix + ".projector", out);
    }

   private:
    void check_input(const Tensor<T>& x) const {
        const auto s = config_.input_size;
        if (x.rank() != 4 || x.dim(1) != config_.input_channels || x.dim(2) != s || x.dim(3) != s) {
            throw DimensionError("encoder: expected input (B," + std::to_string(config_.input_channels) + "," +
                                 std::to_string(s) + "," + std::to_string(s) + "), got " + shape_str(x.shape()));
        }
    }

    EncoderConfig config_;
    std::unique_ptr<Backbone<T>> backbone_;
    Projector<T> projector_;
};

/// Linear(d -> d/4) + BN + ReLU, Linear(d/4 -> d).
template <typename T>
class Predictor {
   public:
    Predictor(std::size_t d_hid, SeededRng& rng) : fc1_(d_hid, d_hid / 4, rng), bn_(d_hid / 4), fc2_(d_hid / 4, d_hid, rng) {}

    Tensor<T> operator()(const Tensor<T>& z, Mode mode) { return fc2_(bottleneck(z, mode)); }

    Tensor<T> bottleneck(const Tensor<T>& z, Mode mode) {
        if (z.rank() != 2 || z.dim(1) != fc1_.in_features()) {
            throw DimensionError("predictor: expected (B," + std::to_string(fc1_.in_features()) + "), got " +
                                 shape_str(z.shape()));
        }
        return relu(bn_(fc1_(z), mode));
    }

    std::size_t hidden_width() const { return fc1_.out_features(); }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        fc1_.collect(prefix + ".fc1", out);
        bn_.collect(prefix + ".bn", out);
        fc2_.collect(prefix + ".fc2", out);
    }

   private:
    Linear<T> fc1_;
    BatchNorm<T> bn_;
    Linear<T> fc2_;
};

/// Linear(d_hid -> C0) viewed as (C0,1,1), then stride-2 transposed convs
/// (k=3, padding=1, output_padding=1) halving channels and doubling the
/// spatial size up to input_size; BN+ReLU between layers, sigmoid output.
template <typename T>
class Decoder {
   public:
    Decoder(const EncoderConfig& cfg, std::size_t base_channels, SeededRng& rng)
        : fc_(cfg.d_hid, base_channels, rng), fc_bn_(base_channels), base_(base_channels) {
        const std::size_t layers = cfg.decoder_layers();
        std::size_t in = base_channels;
        for (std::size_t i = 0; i < layers; ++i) {
            const bool last = i + 1 == layers;
            const std::size_t out = last ? cfg.input_channels : std::max<std::size_t>(in / 2, 1);
            deconvs_.emplace_back(in, out, 3, 2, 1, 1, last, rng);
            if (!last) norms_.emplace_back(out);
            in = out;
        }
    }

    Tensor<T> operator()(const Tensor<T>& z, Mode mode, std::vector<Shape>* trace = nullptr) {
        if (z.rank() != 2 || z.dim(1) != fc_.in_features()) {
            throw DimensionError("decoder: expected (B," + std::to_string(fc_.in_features()) + "), got " +
                                 shape_str(z.shape()));
        }
        auto y = relu(fc_bn_(fc_(z), mode));
        y = reshape(y, {z.dim(0), base_, 1, 1});
        if (trace) trace->push_back(y.shape());
        for (std::size_t i = 0; i < deconvs_.size(); ++i) {
            y = deconvs_[i](y);
            if (i < norms_.size()) y = relu(norms_[i](y, mode));
            if (trace) trace->push_back(y.shape());
        }
        return sigmoid(y);
    }

    std::size_t layers() const { return deconvs_.size(); }
    const std::vector<ConvTranspose2d<T>>& deconvs() const { return deconvs_; }

    void collect(const std::string& prefix, ParameterList<T>& out) {
        fc_.collect(prefix + ".fc", out);
        fc_bn_.collect(prefix + ".fc_bn", out);
        for (std::size_t i = 0; i < deconvs_.size(); ++i) {
            deconvs_[i].collect(prefix + ".deconv" + std::to_string(i), out);
            if (i < norms_.size()) norms_[i].collect(prefix + ".bn" + std::to_string(i), out);
        }
    }

   private:
    Linear<T> fc_;
    BatchNorm<T> fc_bn_;
    std::size_t base_;
    std::vector<ConvTranspose2d<T>> deconvs_;
    std::vector<BatchNorm<T>> norms_;
};

template <typename T>
class ClassifierHead {
   public:
    ClassifierHead(std::size_t in, std::size_t num_classes, SeededRng& rng) : fc_(in, num_classes, rng) {}
    Tensor<T> operator()(const Tensor<T>& features) const { return fc_(features); }
    void collect(const std::string& prefix, ParameterList<T>& out) { fc_.collect(prefix + ".fc", out); }
    std::size_t in_features() const { return fc_.in_features(); }

   private:
    Linear<T> fc_;
};

template <typename T>
struct SiameseOutputs {
    Tensor<T> z1, z2, p1, p2;
};

template <typename T>
struct ReconstructionOutputs {
    Tensor<T> r1, r2;
};

template <typename T>
struct SidaeOutputs {
    Tensor<T> z1, z2, p1, p2, r1, r2;
};

/// A pre-training model: shared encoder plus the heads its kind needs
/// (predictor for simsiam/sidae, decoder for dae/sidae). Components draw
/// their initial weights from separate streams of `seed`, so models of
/// different kinds built from one seed share identical encoder and predictor
/// weights.
template <typename T>
class Model {
   public:
    Model(ModelKind kind, const EncoderConfig& cfg, std::uint64_t seed)
        : kind_(kind), config_(cfg), encoder_(build_encoder(cfg, seed)) {
        if (kind == ModelKind::simsiam || kind == ModelKind::sidae) {
            SeededRng rng(seed, 2);
            predictor_.emplace(cfg.d_hid, rng);
        }
        if (kind == ModelKind::dae || kind == ModelKind::sidae) {
            SeededRng rng(seed, 3);
            decoder_.emplace(cfg, cfg.feature_dim(), rng);
        }
    }

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    ModelKind kind() const { return kind_; }
    const EncoderConfig& config() const { return config_; }
    Mode mode() const { return mode_; }
    void set_mode(Mode m) { mode_ = m; }

    Encoder<T>& encoder() { return encoder_; }
    bool has_predictor() const { return predictor_.has_value(); }
    bool has_decoder() const { return decoder_.has_value(); }
    Predictor<T>& predictor() { return predictor_.value(); }
    Decoder<T>& decoder() { return decoder_.value(); }

    Tensor<T> encode(const Tensor<T>& x) { return encoder_(x, mode_); }
    Tensor<T> predict(const Tensor<T>& z) { return predictor()(z, mode_); }
    Tensor<T> decode(const Tensor<T>& z) { return decoder()(z, mode_); }

    SiameseOutputs<T> simsiam_forward(const Tensor<T>& x1, const Tensor<T>& x2) {
        auto z1 = encode(x1);
        auto z2 = encode(x2);
        return {z1, z2, predict(z1), predict(z2)};
    }

    ReconstructionOutputs<T> dae_forward(const Tensor<T>& x1, const Tensor<T>& x2) {
        return {decode(encode(x1)), decode(encode(x2))};
    }

    // Each z is computed once and feeds both heads.
    SidaeOutputs<T> sidae_forward(const Tensor<T>& x1, const Tensor<T>& x2) {
        auto z1 = encode(x1);
        auto z2 = encode(x2);
        return {z1, z2, predict(z1), predict(z2), decode(z1), decode(z2)};
    }

    ParameterList<T> parameters() {
        ParameterList<T> out;
        encoder_.collect("encoder", out);
        if (predictor_) predictor_->collect("predictor", out);
        if (decoder_) decoder_->collect("decoder", out);
        return out;
    }

   private:
    static Encoder<T> build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        SeededRng rng(seed, 1);
        return Encoder<T>(cfg, rng);
    }

    ModelKind kind_;
    EncoderConfig config_;
    Encoder<T> encoder_;
    std::optional<Predictor<T>> predictor_;
    std::optional<Decoder<T>> decoder_;
    Mode mode_ = Mode::train;
};

}  // namespace sidae
