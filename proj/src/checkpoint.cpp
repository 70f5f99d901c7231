#include "alignlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little, "container payloads are little-endian");

namespace alignlab {

namespace {

std::size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    throw FormatError("unknown dtype tag");
}

constexpr char kMagic[8] = {'A', 'L', 'N', 'B', 'O', 'X', '0', '1'};

void put_bytes(std::string& out, const void* src, std::size_t n) {
    out.append(reinterpret_cast<const char*>(src), n);
}

template <typename T>
void put_scalar(std::string& out, T value) {
    put_bytes(out, &value, sizeof(T));
}

struct Reader {
    explicit Reader(std::vector<char> bytes) : buffer(std::move(bytes)) {}

    void take(void* dst, std::size_t n) {
        if (offset + n > buffer.size()) {
            throw FormatError("unexpected end of file at offset " + std::to_string(offset));
        }
        std::memcpy(dst, buffer.data() + offset, n);
        offset += n;
    }

    template <typename T>
    T scalar() {
        T value{};
        take(&value, sizeof(T));
        return value;
    }

    std::string text(std::size_t n) {
        std::string s(n, '\0');
        take(s.data(), n);
        return s;
    }

    std::vector<char> buffer;
    std::size_t offset = 0;
};

}  // namespace

std::vector<double> StoredTensor::to_doubles() const {
    const std::size_t n = static_cast<std::size_t>(count());
    std::vector<double> out(n);
    switch (dtype) {
        case DType::f32: {
            for (std::size_t i = 0; i < n; ++i) {
                float v;
                std::memcpy(&v, raw.data() + i * 4, 4);
                out[i] = static_cast<double>(v);
            }
            break;
        }
        case DType::f64: {
            std::memcpy(out.data(), raw.data(), n * 8);
            break;
        }
        case DType::u8: {
            for (std::size_t i = 0; i < n; ++i) {
                out[i] = static_cast<double>(std::to_integer<std::uint8_t>(raw[i]));
            }
            break;
        }
    }
    return out;
}

StoredTensor StoredTensor::from_values(const Shape& shape, std::span<const double> values, DType dtype) {
    if (numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("stored tensor shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
    }
    StoredTensor t;
    t.dtype = dtype;
    t.shape = shape;
    t.raw.resize(values.size() * dtype_size(dtype));
    if (dtype == DType::f32) {
        for (std::size_t i = 0; i < values.size(); ++i) {
            const float v = static_cast<float>(values[i]);
            std::memcpy(t.raw.data() + i * 4, &v, 4);
        }
    } else if (dtype == DType::f64) {
        std::memcpy(t.raw.data(), values.data(), values.size() * 8);
    } else {
        for (std::size_t i = 0; i < values.size(); ++i) {
            t.raw[i] = std::byte(static_cast<std::uint8_t>(values[i]));
        }
    }
    return t;
}

StoredTensor StoredTensor::from_bytes_u8(const Shape& shape, std::span<const std::uint8_t> bytes) {
    if (numel(shape) != static_cast<std::int64_t>(bytes.size())) {
        throw ShapeError("stored tensor shape " + shape_str(shape) + " does not hold " +
                         std::to_string(bytes.size()) + " bytes");
    }
    StoredTensor t;
    t.dtype = DType::u8;
    t.shape = shape;
    t.raw.resize(bytes.size());
    std::memcpy(t.raw.data(), bytes.data(), bytes.size());
    return t;
}

void write_container(const std::filesystem::path& path, const Container& container) {
    std::string out;
    put_bytes(out, kMagic, sizeof(kMagic));
    put_scalar<std::uint32_t>(out, kContainerVersion);
    const std::string meta = container.metadata.dump();
    put_scalar<std::uint64_t>(out, meta.size());
    put_bytes(out, meta.data(), meta.size());
    put_scalar<std::uint64_t>(out, container.entries.size());
    for (const auto& [name, tensor] : container.entries) {
        put_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        put_bytes(out, name.data(), name.size());
        put_scalar<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.dtype));
        put_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.shape.size()));
        for (std::int64_t d : tensor.shape) {
            put_scalar<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        }
        put_scalar<std::uint64_t>(out, tensor.raw.size());
        put_bytes(out, tensor.raw.data(), tensor.raw.size());
    }

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) {
        throw FormatError("cannot open '" + path.string() + "' for writing");
    }
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) {
        throw FormatError("short write to '" + path.string() + "'");
    }
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw FormatError("cannot open '" + path.string() + "'");
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    Reader reader(std::move(bytes));

    char magic[8];
    reader.take(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("'" + path.string() + "' is not a container file");
    }
    const auto version = reader.scalar<std::uint32_t>();
    if (version != kContainerVersion) {
        throw FormatError("unsupported container format version " + std::to_string(version));
    }

    Container container;
    const auto meta_len = reader.scalar<std::uint64_t>();
    const std::string meta = reader.text(meta_len);
    try {
        container.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad container metadata: " + std::string(e.what()));
    }

    const auto entry_count = reader.scalar<std::uint64_t>();
    for (std::uint64_t i = 0; i < entry_count; ++i) {
        const auto name_len = reader.scalar<std::uint32_t>();
        const std::string name = reader.text(name_len);
        StoredTensor tensor;
        const auto dtype = reader.scalar<std::uint8_t>();
        if (dtype > 2) {
            throw FormatError("unknown dtype tag " + std::to_string(dtype) + " for entry '" + name + "'");
        }
        tensor.dtype = static_cast<DType>(dtype);
        const auto ndim = reader.scalar<std::uint32_t>();
        tensor.shape.resize(ndim);
        for (auto& d : tensor.shape) {
            d = static_cast<std::int64_t>(reader.scalar<std::uint64_t>());
        }
        const auto payload = reader.scalar<std::uint64_t>();
        if (payload != static_cast<std::uint64_t>(tensor.count()) * dtype_size(tensor.dtype)) {
            throw FormatError("payload size mismatch for entry '" + name + "'");
        }
        tensor.raw.resize(payload);
        reader.take(tensor.raw.data(), payload);
        container.entries.emplace(name, std::move(tensor));
    }
    return container;
}

// --------------------------------------------------------------------------
// Model checkpoints
// --------------------------------------------------------------------------

nlohmann::json tower_config_to_json(const TowerConfig& config) {
    return {
        {"modality", config.modality == Modality::image ? "image" : "text"},
        {"depth", config.depth},
        {"hidden", config.hidden},
        {"heads", config.heads},
        {"mlp_ratio", config.mlp_ratio},
        {"vocab_size", config.vocab_size},
        {"max_seq_len", config.max_seq_len},
        {"image_size", config.image_size},
        {"patch_size", config.patch_size},
        {"channels", config.channels},
    };
}

TowerConfig tower_config_from_json(const nlohmann::json& j) {
    TowerConfig c;
    c.modality = j.at("modality") == "image" ? Modality::image : Modality::text;
    c.depth = j.at("depth");
    c.hidden = j.at("hidden");
    c.heads = j.at("heads");
    c.mlp_ratio = j.at("mlp_ratio");
    c.vocab_size = j.at("vocab_size");
    c.max_seq_len = j.at("max_seq_len");
    c.image_size = j.at("image_size");
    c.patch_size = j.at("patch_size");
    c.channels = j.at("channels");
    return c;
}

nlohmann::json size_preset_to_json(const SizePreset& preset) {
    return {
        {"name", preset.name},
        {"image", tower_config_to_json(preset.image)},
        {"text", tower_config_to_json(preset.text)},
        {"proj_dim", preset.proj_dim},
    };
}

SizePreset size_preset_from_json(const nlohmann::json& j) {
    SizePreset preset;
    preset.name = j.at("name");
    preset.image = tower_config_from_json(j.at("image"));
    preset.text = tower_config_from_json(j.at("text"));
    preset.proj_dim = j.at("proj_dim");
    return preset;
}

nlohmann::json adapter_state_to_json(const AdapterState& state) {
    nlohmann::json list = nlohmann::json::array();
    const auto push = [&list](const AdapterSpec& spec) {
        list.push_back({{"kind", to_string(spec.kind)},
                        {"target", to_string(spec.target)},
                        {"bottleneck_divisor", spec.bottleneck_divisor},
                        {"count", spec.count}});
    };
    if (state.layerwise) push(*state.layerwise);
    if (state.deep) push(*state.deep);
    return list;
}

AdapterState adapter_state_from_json(const nlohmann::json& j) {
    AdapterState state;
    for (const auto& item : j) {
        AdapterSpec spec;
        spec.kind = adapter_kind_from_string(item.at("kind"));
        spec.target = adapter_target_from_string(item.at("target"));
        spec.bottleneck_divisor = item.at("bottleneck_divisor");
        spec.count = item.at("count");
        if (spec.kind == AdapterKind::layerwise) {
            state.layerwise = spec;
        } else {
            state.deep = spec;
        }
    }
    return state;
}

void save_checkpoint(const DualEncoder& model, const std::filesystem::path& path, const nlohmann::json& extra) {
    Container container;
    container.metadata = {
        {"format", "checkpoint"},
        {"tool_version", kToolVersion},
        {"preset", size_preset_to_json(model.preset())},
        {"adapters", adapter_state_to_json(model.adapters())},
        {"seed", model.seed()},
        {"gelu", "erf"},
        {"block_order", "pre_ln"},
        {"precision", global_precision() == Precision::f32 ? "f32" : "f64"},
    };
    for (const auto& [key, value] : extra.items()) {
        container.metadata[key] = value;
    }
    const DType dtype = global_precision() == Precision::f32 ? DType::f32 : DType::f64;
    for (const auto& [p, tensor] : model.params()) {
        container.entries.emplace(p, StoredTensor::from_values(tensor.shape(), tensor.values(), dtype));
    }
    write_container(path, container);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    Container container = read_container(path);
    if (!container.metadata.contains("format") || container.metadata["format"] != "checkpoint") {
        throw FormatError("'" + path.string() + "' is not a checkpoint");
    }
    const SizePreset preset = size_preset_from_json(container.metadata.at("preset"));
    const AdapterState adapters = adapter_state_from_json(container.metadata.at("adapters"));
    DualEncoder model =
        DualEncoder::build_empty(preset, adapters, container.metadata.value("seed", std::uint64_t{0}));
    if (model.params().size() != container.entries.size()) {
        throw FormatError("checkpoint holds " + std::to_string(container.entries.size()) + " parameters, schema has " +
                          std::to_string(model.params().size()));
    }
    for (auto& [p, tensor] : model.params()) {
        const auto it = container.entries.find(p);
        if (it == container.entries.end()) {
            throw FormatError("checkpoint is missing parameter '" + p + "'");
        }
        if (it->second.shape != tensor.shape()) {
            throw FormatError("checkpoint parameter '" + p + "' has shape " + shape_str(it->second.shape) +
                              ", schema expects " + shape_str(tensor.shape()));
        }
        const std::vector<double> values = it->second.to_doubles();
        std::copy(values.begin(), values.end(), tensor.values().begin());
    }
    return {std::move(model), std::move(container.metadata)};
}

}  // namespace alignlab
