#include "alignlab/encoder.hpp"

#include <cmath>
#include <set>

namespace alignlab {

void TowerConfig::validate() const {
    if (depth <= 0 || hidden <= 0 || heads <= 0 || mlp_ratio <= 0) {
        throw ConfigError("tower sizes must be positive");
    }
    if (hidden % heads != 0) {
        throw ConfigError("hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
    }
    if (modality == Modality::text) {
        if (vocab_size <= 3 || max_seq_len <= 1) {
            throw ConfigError("text tower needs a vocabulary and sequence length");
        }
    } else {
        if (image_size <= 0 || patch_size <= 0 || channels <= 0 || image_size % patch_size != 0) {
            throw ConfigError("image size " + std::to_string(image_size) + " not divisible by patch " +
                              std::to_string(patch_size));
        }
    }
}

namespace {

TowerConfig text_tower(int depth, int hidden, int heads, int vocab, int seq) {
    TowerConfig c;
    c.modality = Modality::text;
    c.depth = depth;
    c.hidden = hidden;
    c.heads = heads;
    c.vocab_size = vocab;
    c.max_seq_len = seq;
    return c;
}

TowerConfig image_tower(int depth, int hidden, int heads, int image_size, int patch) {
    TowerConfig c;
    c.modality = Modality::image;
    c.depth = depth;
    c.hidden = hidden;
    c.heads = heads;
    c.image_size = image_size;
    c.patch_size = patch;
    return c;
}

}  // namespace

SizePreset size_preset(const std::string& name) {
    if (name == "tiny") {
        return {name, image_tower(4, 128, 4, 32, 8), text_tower(4, 128, 4, 512, 16), 64};
    }
    if (name == "small") {
        return {name, image_tower(4, 512, 8, 256, 16), text_tower(4, 512, 8, 30522, 512), 256};
    }
    if (name == "base") {
        return {name, image_tower(12, 768, 12, 256, 16), text_tower(12, 768, 12, 30522, 512), 256};
    }
    if (name == "large") {
        return {name, image_tower(24, 1024, 16, 256, 16), text_tower(24, 1024, 16, 30522, 512), 256};
    }
    throw ConfigError("unknown size preset '" + name + "'");
}

SizePreset parse_size(const std::string& spec) {
    if (spec.find(':') == std::string::npos) {
        return size_preset(spec);
    }
    std::optional<SizePreset> text_part;
    std::optional<SizePreset> image_part;
    std::size_t begin = 0;
    while (begin <= spec.size()) {
        const std::size_t end = std::min(spec.find(',', begin), spec.size());
        const std::string item = spec.substr(begin, end - begin);
        const std::size_t colon = item.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("bad size spec item '" + item + "' (want tower:size)");
        }
        const std::string tower = item.substr(0, colon);
        const SizePreset named = size_preset(item.substr(colon + 1));
        if (tower == "text") {
            text_part = named;
        } else if (tower == "image") {
            image_part = named;
        } else {
            throw ConfigError("unknown tower '" + tower + "' in size spec");
        }
        begin = end + 1;
        if (end == spec.size()) break;
    }
    if (!text_part || !image_part) {
        throw ConfigError("asymmetric size spec needs both text: and image: parts");
    }
    SizePreset preset;
    preset.name = spec;
    preset.text = text_part->text;
    preset.image = image_part->image;
    preset.proj_dim = std::max(text_part->proj_dim, image_part->proj_dim);
    return preset;
}

// --------------------------------------------------------------------------
// Schema
// --------------------------------------------------------------------------

namespace {

void emit_encoder_layer(std::vector<ParamSpec>& out, const std::string& prefix, int hidden, int mlp_ratio,
                        bool zero_output_projections, const AdapterSpec* layerwise) {
    const std::int64_t d = hidden;
    const std::int64_t ff = static_cast<std::int64_t>(hidden) * mlp_ratio;
    const auto emit_adapter = [&](const std::string& name) {
        const std::int64_t r = hidden / layerwise->bottleneck_divisor;
        out.push_back({prefix + name + ".down.weight", {d, r}, InitKind::normal02});
        out.push_back({prefix + name + ".down.bias", {r}, InitKind::zeros});
        out.push_back({prefix + name + ".up.weight", {r, d}, InitKind::zeros});
        out.push_back({prefix + name + ".up.bias", {d}, InitKind::zeros});
    };

    if (layerwise) emit_adapter("adapter1");
    out.push_back({prefix + "ln1.gamma", {d}, InitKind::ones});
    out.push_back({prefix + "ln1.beta", {d}, InitKind::zeros});
    for (const char* proj : {"q", "k", "v", "out"}) {
        const bool zero = zero_output_projections && std::string(proj) == "out";
        out.push_back({prefix + "attn." + proj + ".weight", {d, d}, zero ? InitKind::zeros : InitKind::normal02});
        out.push_back({prefix + "attn." + proj + ".bias", {d}, InitKind::zeros});
    }
    if (layerwise) emit_adapter("adapter2");
    out.push_back({prefix + "ln2.gamma", {d}, InitKind::ones});
    out.push_back({prefix + "ln2.beta", {d}, InitKind::zeros});
    out.push_back({prefix + "mlp.fc1.weight", {d, ff}, InitKind::normal02});
    out.push_back({prefix + "mlp.fc1.bias", {ff}, InitKind::zeros});
    out.push_back({prefix + "mlp.fc2.weight", {ff, d}, zero_output_projections ? InitKind::zeros : InitKind::normal02});
    out.push_back({prefix + "mlp.fc2.bias", {d}, InitKind::zeros});
}

void emit_tower(std::vector<ParamSpec>& out, const std::string& root, const TowerConfig& config,
                const AdapterState& adapters) {
    const std::int64_t d = config.hidden;
    const bool wants_layerwise = adapters.layerwise &&
                                 (config.modality == Modality::image ? adapters.layerwise->applies_to_image()
                                                                     : adapters.layerwise->applies_to_text());
    const bool wants_deep = adapters.deep && (config.modality == Modality::image ? adapters.deep->applies_to_image()
                                                                                 : adapters.deep->applies_to_text());

    if (config.modality == Modality::text) {
        out.push_back({root + "token_embedding.weight", {config.vocab_size, d}, InitKind::normal02});
        out.push_back({root + "position_embedding.weight", {config.max_seq_len, d}, InitKind::normal02});
    } else {
        out.push_back({root + "patch_embedding.weight", {config.patch_dim(), d}, InitKind::normal02});
        out.push_back({root + "patch_embedding.bias", {d}, InitKind::zeros});
        out.push_back({root + "cls_token", {d}, InitKind::normal02});
        out.push_back({root + "position_embedding.weight", {config.token_count(), d}, InitKind::normal02});
    }
    out.push_back({root + "embed_ln.gamma", {d}, InitKind::ones});
    out.push_back({root + "embed_ln.beta", {d}, InitKind::zeros});
    for (int i = 0; i < config.depth; ++i) {
        emit_encoder_layer(out, root + "layer." + std::to_string(i) + ".", config.hidden, config.mlp_ratio,
                           /*zero_output_projections=*/false, wants_layerwise ? &*adapters.layerwise : nullptr);
    }
    if (wants_deep) {
        for (int k = 0; k < adapters.deep->count; ++k) {
            emit_encoder_layer(out, root + "deep_adapter." + std::to_string(k) + ".", config.hidden, config.mlp_ratio,
                               /*zero_output_projections=*/true, nullptr);
        }
    }
    out.push_back({root + "final_ln.gamma", {d}, InitKind::ones});
    out.push_back({root + "final_ln.beta", {d}, InitKind::zeros});
}

}  // namespace

std::vector<ParamSpec> schema_params(const SizePreset& preset, const AdapterState& adapters) {
    preset.image.validate();
    preset.text.validate();
    if (preset.proj_dim <= 0) {
        throw ConfigError("projection dimension must be positive");
    }
    if (adapters.layerwise) {
        if (adapters.layerwise->applies_to_image()) adapters.layerwise->validate(preset.image.hidden);
        if (adapters.layerwise->applies_to_text()) adapters.layerwise->validate(preset.text.hidden);
    }
    if (adapters.deep) adapters.deep->validate(0);

    std::vector<ParamSpec> out;
    emit_tower(out, "image.", preset.image, adapters);
    emit_tower(out, "text.", preset.text, adapters);
    out.push_back({"head.image_proj.weight", {preset.image.hidden, preset.proj_dim}, InitKind::normal02});
    out.push_back({"head.text_proj.weight", {preset.text.hidden, preset.proj_dim}, InitKind::normal02});
    out.push_back({"head.log_tau", {1}, InitKind::log_tau});
    return out;
}

bool is_adapter_path(const std::string& path) {
    std::size_t begin = 0;
    while (begin <= path.size()) {
        const std::size_t end = std::min(path.find('.', begin), path.size());
        const std::string segment = path.substr(begin, end - begin);
        if (segment == "adapter1" || segment == "adapter2" || segment == "deep_adapter") {
            return true;
        }
        if (end == path.size()) break;
        begin = end + 1;
    }
    return false;
}

// --------------------------------------------------------------------------
// Construction
// --------------------------------------------------------------------------

void DualEncoder::allocate(const std::vector<ParamSpec>& specs, Rng* rng) {
    for (const ParamSpec& spec : specs) {
        if (params_.contains(spec.path)) {
            continue;
        }
        const std::int64_t n = numel(spec.shape);
        std::vector<double> values(static_cast<std::size_t>(n), 0.0);
        switch (spec.init) {
            case InitKind::zeros:
                break;
            case InitKind::ones:
                std::fill(values.begin(), values.end(), 1.0);
                break;
            case InitKind::normal02:
                if (rng) {
                    for (double& v : values) v = rng->normal(0.0, 0.02);
                }
                break;
            case InitKind::log_tau:
                values[0] = std::log(kInitialTau);
                break;
        }
        Tensor t = Tensor::from_values(spec.shape, std::move(values));
        t.set_param_path(spec.path);
        params_.emplace(spec.path, std::move(t));
    }
}

DualEncoder DualEncoder::build(const SizePreset& preset, std::uint64_t seed) {
    DualEncoder model;
    model.preset_ = preset;
    model.seed_ = seed;
    Rng rng(mix_seed(seed, 0));
    model.allocate(schema_params(preset, model.adapters_), &rng);
    return model;
}

DualEncoder DualEncoder::build_empty(const SizePreset& preset, const AdapterState& adapters, std::uint64_t seed) {
    DualEncoder model;
    model.preset_ = preset;
    model.adapters_ = adapters;
    model.seed_ = seed;
    model.allocate(schema_params(preset, adapters), nullptr);
    return model;
}

void DualEncoder::insert_layerwise(const AdapterSpec& spec) {
    if (spec.kind != AdapterKind::layerwise) {
        throw ConfigError("insert_layerwise called with a non-layerwise spec");
    }
    if (adapters_.layerwise) {
        throw ConfigError("layerwise adapters already inserted");
    }
    adapters_.layerwise = spec;
    Rng rng(mix_seed(seed_, 1));
    allocate(schema_params(preset_, adapters_), &rng);
}

void DualEncoder::insert_deep(const AdapterSpec& spec) {
    if (spec.kind != AdapterKind::deep) {
        throw ConfigError("insert_deep called with a non-deep spec");
    }
    if (adapters_.deep) {
        throw ConfigError("deep adapters already inserted");
    }
    adapters_.deep = spec;
    Rng rng(mix_seed(seed_, 2));
    allocate(schema_params(preset_, adapters_), &rng);
}

Tensor DualEncoder::param(const std::string& path) const {
    const auto it = params_.find(path);
    if (it == params_.end()) {
        throw ConfigError("no parameter at path '" + path + "'");
    }
    return it->second;
}

std::vector<std::string> DualEncoder::trainable_paths() const {
    std::vector<std::string> out;
    for (const auto& [path, tensor] : params_) {
        if (tensor.requires_grad()) out.push_back(path);
    }
    return out;
}

// --------------------------------------------------------------------------
// Forward
// --------------------------------------------------------------------------

Tensor DualEncoder::layerwise_adapter(const std::string& prefix, const Tensor& x) {
    const std::int64_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
    Tensor flat = reshape(x, {b * s, d});
    Tensor h = add_row_bias(matmul(flat, param(prefix + "down.weight")), param(prefix + "down.bias"));
    h = gelu(h);
    h = add_row_bias(matmul(h, param(prefix + "up.weight")), param(prefix + "up.bias"));
    return add(x, reshape(h, {b, s, d}));
}

Tensor DualEncoder::attention(const std::string& prefix, const TowerConfig& config, const Tensor& x,
                              const Tensor* mask) {
    const std::int64_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
    const std::int64_t heads = config.heads, hd = config.head_dim();
    Tensor flat = reshape(x, {b * s, d});

    const auto proj_heads = [&](const char* name) {
        Tensor p = add_row_bias(matmul(flat, param(prefix + name + ".weight")), param(prefix + name + ".bias"));
        p = reshape(p, {b, s, heads, hd});
        p = permute(p, {0, 2, 1, 3});
        return reshape(p, {b * heads, s, hd});
    };
    Tensor q = proj_heads("q");
    Tensor k = proj_heads("k");
    Tensor v = proj_heads("v");

    Tensor scores = scale(bmm_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
    if (mask) {
        scores = add(scores, *mask);
    }
    Tensor weights = softmax_lastdim(scores);
    Tensor context = bmm(weights, v);
    context = reshape(context, {b, heads, s, hd});
    context = permute(context, {0, 2, 1, 3});
    context = reshape(context, {b * s, d});
    Tensor out = add_row_bias(matmul(context, param(prefix + "out.weight")), param(prefix + "out.bias"));
    return reshape(out, {b, s, d});
}

Tensor DualEncoder::mlp_block(const std::string& prefix, const Tensor& x) {
    const std::int64_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
    Tensor h = reshape(x, {b * s, d});
    h = add_row_bias(matmul(h, param(prefix + "fc1.weight")), param(prefix + "fc1.bias"));
    h = gelu(h);
    h = add_row_bias(matmul(h, param(prefix + "fc2.weight")), param(prefix + "fc2.bias"));
    return reshape(h, {b, s, d});
}

Tensor DualEncoder::encoder_layer(const std::string& prefix, const TowerConfig& config, Tensor x, const Tensor* mask,
                                  bool host_layer) {
    const bool with_adapters =
        host_layer && adapters_.layerwise &&
        (config.modality == Modality::image ? adapters_.layerwise->applies_to_image()
                                            : adapters_.layerwise->applies_to_text());
    // pre-LN block; adapters sit immediately before each normalization
    if (with_adapters) {
        x = layerwise_adapter(prefix + "adapter1.", x);
    }
    Tensor h = layer_norm(x, param(prefix + "ln1.gamma"), param(prefix + "ln1.beta"), kLayerNormEps);
    x = add(x, attention(prefix + "attn.", config, h, mask));
    if (with_adapters) {
        x = layerwise_adapter(prefix + "adapter2.", x);
    }
    Tensor h2 = layer_norm(x, param(prefix + "ln2.gamma"), param(prefix + "ln2.beta"), kLayerNormEps);
    return add(x, mlp_block(prefix + "mlp.", h2));
}

Tensor DualEncoder::tower_forward(const std::string& root, const TowerConfig& config, Tensor x, const Tensor* mask) {
    x = layer_norm(x, param(root + "embed_ln.gamma"), param(root + "embed_ln.beta"), kLayerNormEps);
    for (int i = 0; i < config.depth; ++i) {
        x = encoder_layer(root + "layer." + std::to_string(i) + ".", config, x, mask, /*host_layer=*/true);
    }
    const bool wants_deep = adapters_.deep && (config.modality == Modality::image ? adapters_.deep->applies_to_image()
                                                                                  : adapters_.deep->applies_to_text());
    if (wants_deep) {
        for (int k = 0; k < adapters_.deep->count; ++k) {
            x = encoder_layer(root + "deep_adapter." + std::to_string(k) + ".", config, x, mask, /*host_layer=*/false);
        }
    }
    x = layer_norm(x, param(root + "final_ln.gamma"), param(root + "final_ln.beta"), kLayerNormEps);
    return select_token(x, 0);
}

Tensor DualEncoder::encode_text(const std::vector<std::vector<std::int32_t>>& token_ids, std::int32_t pad_id) {
    const TowerConfig& config = preset_.text;
    if (token_ids.empty()) {
        throw ContractError("encode_text: empty batch");
    }
    const std::int64_t b = static_cast<std::int64_t>(token_ids.size());
    const std::int64_t s = static_cast<std::int64_t>(token_ids.front().size());
    if (s < 1 || s > config.max_seq_len) {
        throw ShapeError("encode_text: sequence length " + std::to_string(s) + " outside [1, " +
                         std::to_string(config.max_seq_len) + "]");
    }
    // The first pad terminates the sequence; everything at or after it is
    // padding and is masked out of attention regardless of its id.
    std::vector<std::int32_t> flat_ids;
    flat_ids.reserve(static_cast<std::size_t>(b * s));
    std::vector<std::int64_t> lengths(static_cast<std::size_t>(b), s);
    bool any_pad = false;
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        const auto& sequence = token_ids[i];
        if (static_cast<std::int64_t>(sequence.size()) != s) {
            throw ShapeError("encode_text: ragged batch, expected padded sequences of one length");
        }
        for (std::size_t j = 0; j < sequence.size(); ++j) {
            const std::int32_t id = sequence[j];
            if (id < 0 || id >= config.vocab_size) {
                throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(config.vocab_size));
            }
            if (id == pad_id && static_cast<std::int64_t>(j) < lengths[i]) {
                lengths[i] = static_cast<std::int64_t>(j);
                any_pad = true;
            }
            flat_ids.push_back(id);
        }
    }

    Tensor tokens = rows_lookup(param("text.token_embedding.weight"), flat_ids);
    std::vector<std::int32_t> positions(static_cast<std::size_t>(b * s));
    for (std::int64_t i = 0; i < b * s; ++i) positions[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i % s);
    Tensor pos = rows_lookup(param("text.position_embedding.weight"), positions);
    Tensor x = reshape(add(tokens, pos), {b, s, config.hidden});

    Tensor mask;
    if (any_pad) {
        // additive mask, -1e9 on padded keys for every query row of every head
        const std::int64_t heads = config.heads;
        std::vector<double> mask_values(static_cast<std::size_t>(b * heads * s * s), 0.0);
        for (std::int64_t i = 0; i < b; ++i) {
            for (std::int64_t key = lengths[static_cast<std::size_t>(i)]; key < s; ++key) {
                for (std::int64_t h = 0; h < heads; ++h) {
                    for (std::int64_t query = 0; query < s; ++query) {
                        mask_values[static_cast<std::size_t>(((i * heads + h) * s + query) * s + key)] = -1e9;
                    }
                }
            }
        }
        mask = Tensor::from_values({b * heads, s, s}, std::move(mask_values));
    }
    return tower_forward("text.", config, x, mask.valid() ? &mask : nullptr);
}

Tensor DualEncoder::encode_image(const Tensor& pixels) {
    const TowerConfig& config = preset_.image;
    if (pixels.rank() != 4 || pixels.dim(1) != config.channels || pixels.dim(2) != config.image_size ||
        pixels.dim(3) != config.image_size) {
        throw ShapeError("encode_image: expected [b," + std::to_string(config.channels) + "," +
                         std::to_string(config.image_size) + "," + std::to_string(config.image_size) + "], got " +
                         shape_str(pixels.shape()));
    }
    const std::int64_t b = pixels.dim(0);
    const std::int64_t np = config.token_count() - 1;
    Tensor patches = patchify(pixels, config.patch_size);
    patches = reshape(patches, {b * np, config.patch_dim()});
    Tensor embedded = add_row_bias(matmul(patches, param("image.patch_embedding.weight")),
                                   param("image.patch_embedding.bias"));
    Tensor x = prepend_token(reshape(embedded, {b, np, config.hidden}), param("image.cls_token"));

    const std::int64_t tokens = np + 1;
    std::vector<std::int32_t> positions(static_cast<std::size_t>(b * tokens));
    for (std::int64_t i = 0; i < b * tokens; ++i) {
        positions[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i % tokens);
    }
    Tensor pos = rows_lookup(param("image.position_embedding.weight"), positions);
    x = reshape(add(reshape(x, {b * tokens, config.hidden}), pos), {b, tokens, config.hidden});
    return tower_forward("image.", config, x, nullptr);
}

Tensor DualEncoder::project_image(const Tensor& encoded) {
    return l2_normalize_rows(matmul(encoded, param("head.image_proj.weight")));
}

Tensor DualEncoder::project_text(const Tensor& encoded) {
    return l2_normalize_rows(matmul(encoded, param("head.text_proj.weight")));
}

}  // namespace alignlab
