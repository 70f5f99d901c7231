#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "alignlab/encoder.hpp"
#include "alignlab/tensor.hpp"

namespace alignlab {

inline constexpr char kToolVersion[] = "0.1.0";
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

// One serialized array: dtype tag, shape, little-endian payload.
struct StoredTensor {
    DType dtype = DType::f32;
    Shape shape;
    std::vector<std::byte> raw;

    std::int64_t count() const { return numel(shape); }
    std::vector<double> to_doubles() const;

    static StoredTensor from_values(const Shape& shape, std::span<const double> values, DType dtype);
    static StoredTensor from_bytes_u8(const Shape& shape, std::span<const std::uint8_t> bytes);
};

// Versioned container: JSON metadata plus named tensors. Checkpoints and
// corpus image files share this format.
struct Container {
    nlohmann::json metadata;
    std::map<std::string, StoredTensor> entries;
};

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

// --------------------------------------------------------------------------
// Model checkpoints
// --------------------------------------------------------------------------

nlohmann::json tower_config_to_json(const TowerConfig& config);
TowerConfig tower_config_from_json(const nlohmann::json& j);
nlohmann::json size_preset_to_json(const SizePreset& preset);
SizePreset size_preset_from_json(const nlohmann::json& j);
nlohmann::json adapter_state_to_json(const AdapterState& state);
AdapterState adapter_state_from_json(const nlohmann::json& j);

// extra carries run-specific fields (step, train preset, paper_literal flag).
void save_checkpoint(const DualEncoder& model, const std::filesystem::path& path, const nlohmann::json& extra);

struct LoadedCheckpoint {
    DualEncoder model;
    nlohmann::json metadata;
};

// Rebuilds the model (including inserted adapters) from metadata, then loads
// every parameter. Rejects unknown format versions and path/shape mismatches.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace alignlab
