#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sidae/models.hpp"
#include "sidae/optim.hpp"

namespace sidae {

// Layout (all integers little-endian):
//   magic "SIDAECKP" | u32 format_version | u64 header length | header JSON
//   u64 entry count, then per entry:
//   u32 name length | name | u8 dtype | u32 rank | u64 dims[rank] | raw values
inline constexpr char kCheckpointMagic[8] = {'S', 'I', 'D', 'A', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    DType dtype = DType::float32;
    Shape shape;
    std::vector<std::uint8_t> raw;  // little-endian values
};

struct Checkpoint {
    nlohmann::ordered_json header;
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::vector<std::uint8_t>& in, std::size_t& off, const std::string& source) {
    if (off + sizeof(U) > in.size()) throw FormatError(source + ": truncated at offset " + std::to_string(off));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[off + i]) << (8 * i);
    off += sizeof(U);
    return v;
}

template <typename T>
using bits_of = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

inline std::size_t dtype_size(DType d) { return d == DType::float32 ? 4 : 8; }

}  // namespace detail

template <typename T>
CheckpointEntry make_entry(std::string name, Shape shape, std::span<const T> values) {
    CheckpointEntry e{std::move(name), dtype_of<T>(), std::move(shape), {}};
    e.raw.reserve(values.size() * sizeof(T));
    for (T v : values) detail::put_le(e.raw, std::bit_cast<detail::bits_of<T>>(v));
    return e;
}

/// Decodes an entry into T, converting between float widths if needed.
template <typename T>
std::vector<T> entry_values(const CheckpointEntry& e) {
    const std::size_t n = shape_numel(e.shape);
    std::vector<T> out(n);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (e.dtype == DType::float32) {
            out[i] = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(e.raw, off, e.name)));
        } else {
            out[i] = static_cast<T>(std::bit_cast<double>(detail::get_le<std::uint64_t>(e.raw, off, e.name)));
        }
    }
    return out;
}

inline std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_le(out, kCheckpointVersion);
    const std::string header = ck.header.dump();
    detail::put_le(out, static_cast<std::uint64_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    detail::put_le(out, static_cast<std::uint64_t>(ck.entries.size()));
    for (const auto& e : ck.entries) {
        detail::put_le(out, static_cast<std::uint32_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(static_cast<std::uint8_t>(e.dtype));
        detail::put_le(out, static_cast<std::uint32_t>(e.shape.size()));
        for (auto d : e.shape) detail::put_le(out, static_cast<std::uint64_t>(d));
        out.insert(out.end(), e.raw.begin(), e.raw.end());
    }
    return out;
}

inline Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& in, const std::string& source) {
    if (in.size() < 8 || std::memcmp(in.data(), kCheckpointMagic, 8) != 0) {
        throw FormatError(source + ": not a checkpoint (bad magic at offset 0)");
    }
    std::size_t off = 8;
    const auto version = detail::get_le<std::uint32_t>(in, off, source);
    if (version != kCheckpointVersion) {
        throw FormatError(source + ": unsupported checkpoint format_version " + std::to_string(version));
    }
    const auto header_len = detail::get_le<std::uint64_t>(in, off, source);
    if (off + header_len > in.size()) throw FormatError(source + ": truncated header");
    Checkpoint ck;
    try {
        ck.header = nlohmann::ordered_json::parse(in.begin() + static_cast<std::ptrdiff_t>(off),
                                                  in.begin() + static_cast<std::ptrdiff_t>(off + header_len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(source + ": malformed header: " + e.what());
    }
    off += header_len;
    const auto count = detail::get_le<std::uint64_t>(in, off, source);
    for (std::uint64_t k = 0; k < count; ++k) {
        CheckpointEntry e;
        const auto name_len = detail::get_le<std::uint32_t>(in, off, source);
        if (off + name_len > in.size()) throw FormatError(source + ": truncated entry name");
        e.name.assign(in.begin() + static_cast<std::ptrdiff_t>(off),
                      in.begin() + static_cast<std::ptrdiff_t>(off + name_len));
        off += name_len;
        const auto dtype = detail::get_le<std::uint8_t>(in, off, source);
        if (dtype > 1) throw FormatError(source + ": unknown dtype for " + e.name);
        e.dtype = static_cast<DType>(dtype);
        const auto rank = detail::get_le<std::uint32_t>(in, off, source);
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(detail::get_le<std::uint64_t>(in, off, source));
        const std::size_t bytes = shape_numel(e.shape) * detail::dtype_size(e.dtype);
        if (off + bytes > in.size()) throw FormatError(source + ": truncated values for " + e.name);
        e.raw.assign(in.begin() + static_cast<std::ptrdiff_t>(off), in.begin() + static_cast<std::ptrdiff_t>(off + bytes));
        off += bytes;
        ck.entries.push_back(std::move(e));
    }
    if (off != in.size()) throw FormatError(source + ": trailing bytes after last entry");
    return ck;
}

/// Writes via a temporary file and rename, so a crash never leaves a torn checkpoint.
inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ck);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingDataError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_checkpoint(bytes, path.string());
}

inline nlohmann::ordered_json encoder_json(ModelKind kind, const EncoderConfig& cfg) {
    return {{"kind", to_string(kind)},
            {"backbone", to_string(cfg.backbone)},
            {"d_hid", cfg.d_hid},
            {"input_channels", cfg.input_channels},
            {"input_size", cfg.input_size}};
}

inline ModelKind model_kind_from(const std::string& s) {
    if (s == "sidae") return ModelKind::sidae;
    if (s == "simsiam") return ModelKind::simsiam;
    if (s == "dae") return ModelKind::dae;
    if (s == "supervised") return ModelKind::supervised;
    throw ConfigError("unknown model kind '" + s + "'");
}

inline BackboneKind backbone_from(const std::string& s) {
    if (s == "resnet18_cifar") return BackboneKind::resnet18_cifar;
    if (s == "tiny") return BackboneKind::tiny;
    throw ConfigError("unknown backbone '" + s + "'");
}

/// Model kind and encoder configuration recorded in a checkpoint header.
inline std::pair<ModelKind, EncoderConfig> checkpoint_model(const Checkpoint& ck) {
    try {
        const auto& m = ck.header.at("model");
        EncoderConfig cfg;
        cfg.backbone = backbone_from(m.at("backbone").get<std::string>());
        cfg.d_hid = m.at("d_hid").get<std::size_t>();
        cfg.input_channels = m.at("input_channels").get<std::size_t>();
        cfg.input_size = m.at("input_size").get<std::size_t>();
        return {model_kind_from(m.at("kind").get<std::string>()), cfg};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header lacks model description: ") + e.what());
    }
}

/// Parameters, BN running statistics and (optionally) momentum buffers.
/// `extra` is merged into the header after the model description.
template <typename T>
Checkpoint capture_checkpoint(Model<T>& model, const SgdState<T>* optimizer, const nlohmann::ordered_json& extra) {
    Checkpoint ck;
    ck.header["format_version"] = kCheckpointVersion;
    ck.header["model"] = encoder_json(model.kind(), model.config());
    for (auto it = extra.begin(); it != extra.end(); ++it) ck.header[it.key()] = it.value();
    auto params = model.parameters();
    for (const auto& p : params.params) {
        ck.entries.push_back(make_entry<T>(p.name, p.tensor.shape(), std::span<const T>(p.tensor.data())));
    }
    for (const auto& b : params.buffers) {
        const Shape s{b.stats->mean.size()};
        ck.entries.push_back(make_entry<T>(b.name + ".running_mean", s, std::span<const T>(b.stats->mean)));
        ck.entries.push_back(make_entry<T>(b.name + ".running_var", s, std::span<const T>(b.stats->var)));
    }
    if (optimizer && !optimizer->velocity.empty()) {
        for (std::size_t i = 0; i < params.params.size(); ++i) {
            ck.entries.push_back(make_entry<T>("optimizer.velocity." + params.params[i].name,
                                               params.params[i].tensor.shape(),
                                               std::span<const T>(optimizer->velocity.at(i))));
        }
    }
    return ck;
}

/// Loads parameters and buffers into `model`, checking kind, configuration
/// and every shape; restores momentum buffers when `optimizer` is given.
template <typename T>
void restore_checkpoint(Model<T>& model, const Checkpoint& ck, SgdState<T>* optimizer = nullptr) {
    const auto [kind, cfg] = checkpoint_model(ck);
    if (kind != model.kind() || encoder_json(kind, cfg) != encoder_json(model.kind(), model.config())) {
        throw ConfigError("checkpoint describes model " + encoder_json(kind, cfg).dump() + " but the target is " +
                          encoder_json(model.kind(), model.config()).dump());
    }
    auto load = [&ck](const std::string& name, const Shape& shape) {
        const CheckpointEntry* e = ck.find(name);
        if (!e) throw ConfigError("checkpoint has no entry '" + name + "'");
        if (e->shape != shape) {
            throw ConfigError("checkpoint entry '" + name + "' has shape " + shape_str(e->shape) + ", model expects " +
                              shape_str(shape));
        }
        return entry_values<T>(*e);
    };
    auto params = model.parameters();
    for (auto& p : params.params) {
        auto v = load(p.name, p.tensor.shape());
        std::copy(v.begin(), v.end(), p.tensor.data().begin());
    }
    for (auto& b : params.buffers) {
        const Shape s{b.stats->mean.size()};
        b.stats->mean = load(b.name + ".running_mean", s);
        b.stats->var = load(b.name + ".running_var", s);
    }
    if (optimizer) {
        optimizer->velocity.clear();
        if (ck.find("optimizer.velocity." + params.params.front().name)) {
            for (auto& p : params.params) optimizer->velocity.push_back(load("optimizer.velocity." + p.name, p.tensor.shape()));
        }
    }
}

}  // namespace sidae
