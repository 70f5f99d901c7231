#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "alignlab/adapters.hpp"
#include "alignlab/rng.hpp"
#include "alignlab/tensor.hpp"

namespace alignlab {

enum class Modality { image, text };

struct TowerConfig {
    Modality modality = Modality::text;
    int depth = 0;
    int hidden = 0;
    int heads = 0;
    int mlp_ratio = 4;
    // text
    int vocab_size = 0;
    int max_seq_len = 0;
    // image
    int image_size = 0;
    int patch_size = 0;
    int channels = 3;

    void validate() const;
    int head_dim() const { return hidden / heads; }
    int grid() const { return image_size / patch_size; }
    int patch_dim() const { return channels * patch_size * patch_size; }
    // image towers: patches plus the class token
    int token_count() const { return grid() * grid() + 1; }

    bool operator==(const TowerConfig&) const = default;
};

struct SizePreset {
    std::string name;
    TowerConfig image;
    TowerConfig text;
    int proj_dim = 0;
};

// tiny is the instantiable desk model; small/base/large exist mainly for
// schema-only counting (their weights would be allocatable but slow to train).
SizePreset size_preset(const std::string& name);
// "text:tiny,image:base" builds an asymmetric pair.
SizePreset parse_size(const std::string& spec);

// --------------------------------------------------------------------------
// Parameter schema
// --------------------------------------------------------------------------

enum class InitKind { normal02, zeros, ones, log_tau };

struct ParamSpec {
    std::string path;
    Shape shape;
    InitKind init = InitKind::normal02;
};

// Which adapters a model currently carries (mirrors metadata in checkpoints).
struct AdapterState {
    std::optional<AdapterSpec> layerwise;
    std::optional<AdapterSpec> deep;

    bool any() const { return layerwise.has_value() || deep.has_value(); }
};

// Full parameter-path enumeration for a dual encoder, without allocating
// anything. Model construction and schema counting both come from this single
// list, so the instantiated path set cannot drift from the counted one.
std::vector<ParamSpec> schema_params(const SizePreset& preset, const AdapterState& adapters);

bool is_adapter_path(const std::string& path);

constexpr double kInitialTau = 0.07;

// --------------------------------------------------------------------------
// Model
// --------------------------------------------------------------------------

class DualEncoder {
public:
    DualEncoder() = default;  // empty shell; assign a built model before use

    static DualEncoder build(const SizePreset& preset, std::uint64_t seed);
    // Allocates the schema with zero values; used when loading checkpoints.
    static DualEncoder build_empty(const SizePreset& preset, const AdapterState& adapters, std::uint64_t seed = 0);

    DualEncoder(DualEncoder&&) = default;
    DualEncoder& operator=(DualEncoder&&) = default;
    DualEncoder(const DualEncoder&) = delete;
    DualEncoder& operator=(const DualEncoder&) = delete;

    // Adds bottleneck adapters before both LN sublayers of every layer of the
    // targeted towers. The up-projection starts at zero, so the forward pass
    // is unchanged until training moves it.
    void insert_layerwise(const AdapterSpec& spec);
    // Appends trainable encoder layers on top of the targeted towers, with
    // zero-initialized output projections (identity at init).
    void insert_deep(const AdapterSpec& spec);

    // CLS hidden state per sequence, before projection. Sequences must be
    // padded to one length with pad_id; pad positions are masked out of
    // attention as keys.
    Tensor encode_text(const std::vector<std::vector<std::int32_t>>& token_ids, std::int32_t pad_id = 0);
    // pixels: [b, channels, image_size, image_size].
    Tensor encode_image(const Tensor& pixels);

    Tensor project_image(const Tensor& encoded);
    Tensor project_text(const Tensor& encoded);

    const SizePreset& preset() const { return preset_; }
    const AdapterState& adapters() const { return adapters_; }
    std::uint64_t seed() const { return seed_; }

    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    Tensor param(const std::string& path) const;
    Tensor temperature() const { return param("head.log_tau"); }

    std::vector<std::string> trainable_paths() const;

private:
    Tensor tower_forward(const std::string& root, const TowerConfig& config, Tensor x, const Tensor* mask);
    Tensor encoder_layer(const std::string& prefix, const TowerConfig& config, Tensor x, const Tensor* mask,
                         bool host_layer);
    Tensor attention(const std::string& prefix, const TowerConfig& config, const Tensor& x, const Tensor* mask);
    Tensor mlp_block(const std::string& prefix, const Tensor& x);
    Tensor layerwise_adapter(const std::string& prefix, const Tensor& x);

    void allocate(const std::vector<ParamSpec>& specs, Rng* rng);

    SizePreset preset_;
    AdapterState adapters_;
    std::map<std::string, Tensor> params_;
    std::uint64_t seed_ = 0;
};

}  // namespace alignlab
