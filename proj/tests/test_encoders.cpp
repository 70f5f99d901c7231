#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "alignlab/encoder.hpp"
#include "alignlab/rng.hpp"

using namespace alignlab;

namespace {

SizePreset micro_preset() {
    SizePreset preset = size_preset("tiny");
    preset.name = "micro";
    preset.image.depth = 2;
    preset.image.hidden = 32;
    preset.image.heads = 2;
    preset.image.image_size = 16;
    preset.image.patch_size = 8;
    preset.text.depth = 2;
    preset.text.hidden = 32;
    preset.text.heads = 2;
    preset.text.vocab_size = 64;
    preset.text.max_seq_len = 8;
    preset.proj_dim = 16;
    return preset;
}

Tensor random_pixels(std::int64_t b, const TowerConfig& config, Rng& rng) {
    std::vector<double> values(
        static_cast<std::size_t>(b * config.channels * config.image_size * config.image_size));
    for (double& v : values) v = rng.normal(0.0, 0.5);
    return Tensor::from_values({b, config.channels, config.image_size, config.image_size}, std::move(values));
}

}  // namespace

TEST_CASE("size presets carry the documented shapes") {
    const SizePreset base = size_preset("base");
    CHECK(base.text.depth == 12);
    CHECK(base.text.hidden == 768);
    CHECK(base.image.token_count() == 257);
    CHECK(base.proj_dim == 256);
    CHECK_THROWS_AS(size_preset("giant"), ConfigError);

    const SizePreset mixed = parse_size("text:tiny,image:base");
    CHECK(mixed.text.hidden == 128);
    CHECK(mixed.image.hidden == 768);
    CHECK(mixed.proj_dim == 256);
}

TEST_CASE("schema paths and model paths agree, with and without adapters") {
    const SizePreset preset = micro_preset();
    for (const bool with_adapters : {false, true}) {
        AdapterState adapters;
        if (with_adapters) {
            AdapterSpec layerwise;
            layerwise.kind = AdapterKind::layerwise;
            AdapterSpec deep;
            deep.kind = AdapterKind::deep;
            adapters.layerwise = layerwise;
            adapters.deep = deep;
        }
        DualEncoder model = DualEncoder::build(preset, 5);
        if (with_adapters) {
            model.insert_layerwise(*adapters.layerwise);
            model.insert_deep(*adapters.deep);
        }
        const std::vector<ParamSpec> schema = schema_params(preset, adapters);
        REQUIRE(schema.size() == model.params().size());
        for (const ParamSpec& spec : schema) {
            REQUIRE(model.params().contains(spec.path));
            CHECK(model.param(spec.path).shape() == spec.shape);
            CHECK(model.param(spec.path).param_path() == spec.path);
        }
    }
}

TEST_CASE("same seed gives bit-identical weights") {
    const SizePreset preset = micro_preset();
    DualEncoder a = DualEncoder::build(preset, 99);
    DualEncoder b = DualEncoder::build(preset, 99);
    DualEncoder c = DualEncoder::build(preset, 100);
    bool any_difference_with_other_seed = false;
    for (const auto& [path, tensor] : a.params()) {
        const auto other = b.param(path).values();
        CHECK(std::equal(tensor.values().begin(), tensor.values().end(), other.begin()));
        const auto third = c.param(path).values();
        any_difference_with_other_seed =
            any_difference_with_other_seed ||
            !std::equal(tensor.values().begin(), tensor.values().end(), third.begin());
    }
    CHECK(any_difference_with_other_seed);
}

TEST_CASE("encode_text shape, determinism and vocabulary errors") {
    DualEncoder model = DualEncoder::build(micro_preset(), 7);
    const std::vector<std::int32_t> sequence = {1, 5, 9, 12, 0, 0, 0, 0};
    Tensor out = model.encode_text({sequence, sequence, sequence});
    CHECK(out.shape() == Shape{3, 32});
    // identical sequences embed identically
    for (std::int64_t j = 0; j < 32; ++j) {
        CHECK(out.values()[j] == out.values()[32 + j]);
        CHECK(out.values()[j] == out.values()[64 + j]);
    }

    CHECK_THROWS_AS(model.encode_text({{1, 64, 0, 0, 0, 0, 0, 0}}), VocabError);
    CHECK_THROWS_AS(model.encode_text({{1, 2, 3}, {1, 2}}), ShapeError);
    Tape::current().clear();
}

TEST_CASE("padding is masked out of attention") {
    DualEncoder model = DualEncoder::build(micro_preset(), 8);
    const std::vector<std::int32_t> padded = {1, 5, 9, 0, 0, 0, 0, 0};
    std::vector<std::int32_t> retagged = padded;
    retagged[6] = 23;  // a pad position after the terminator; id must not matter
    Tensor first = model.encode_text({padded});
    Tensor second = model.encode_text({retagged});
    CHECK(std::equal(first.values().begin(), first.values().end(), second.values().begin()));

    // appending extra padding after the terminator changes nothing either
    const std::vector<std::int32_t> shorter = {1, 5, 9, 0, 0, 0, 0, 0};
    Tensor third = model.encode_text({shorter});
    CHECK(std::equal(first.values().begin(), first.values().end(), third.values().begin()));
    Tape::current().clear();
}

TEST_CASE("encode_image geometry and batch independence") {
    const SizePreset preset = micro_preset();
    DualEncoder model = DualEncoder::build(preset, 9);
    CHECK(preset.image.token_count() == 5);
    CHECK(model.param("image.position_embedding.weight").dim(0) == 5);

    Rng rng(41);
    Tensor batch = random_pixels(3, preset.image, rng);
    Tensor out = model.encode_image(batch);
    CHECK(out.shape() == Shape{3, 32});

    // permuting the batch permutes rows identically
    std::vector<double> swapped(batch.values().begin(), batch.values().end());
    const std::size_t image_size = swapped.size() / 3;
    for (std::size_t i = 0; i < image_size; ++i) {
        std::swap(swapped[i], swapped[image_size + i]);
    }
    Tensor swapped_out = model.encode_image(Tensor::from_values(batch.shape(), std::move(swapped)));
    for (std::int64_t j = 0; j < 32; ++j) {
        CHECK(swapped_out.values()[j] == out.values()[32 + j]);
        CHECK(swapped_out.values()[32 + j] == out.values()[j]);
        CHECK(swapped_out.values()[64 + j] == out.values()[64 + j]);
    }

    // two distinct images embed distinctly
    bool identical = true;
    for (std::int64_t j = 0; j < 32 && identical; ++j) {
        identical = out.values()[j] == out.values()[32 + j];
    }
    CHECK(!identical);

    CHECK_THROWS_AS(model.encode_image(Tensor::zeros({1, 3, 8, 8})), ShapeError);
    Tape::current().clear();
}

TEST_CASE("projection returns unit rows and flags degenerate embeddings") {
    const SizePreset preset = micro_preset();
    DualEncoder model = DualEncoder::build(preset, 10);
    Rng rng(42);
    Tensor encoded = model.encode_image(random_pixels(4, preset.image, rng));
    Tensor projected = model.project_image(encoded);
    CHECK(projected.shape() == Shape{4, 16});
    for (std::int64_t i = 0; i < 4; ++i) {
        double norm_sq = 0.0;
        for (std::int64_t j = 0; j < 16; ++j) {
            const double v = projected.values()[i * 16 + j];
            norm_sq += v * v;
        }
        CHECK(std::abs(std::sqrt(norm_sq) - 1.0) < 1e-6);
    }

    // zero projection weights give degenerate embeddings
    Tensor weights = model.param("head.image_proj.weight");
    std::fill(weights.values().begin(), weights.values().end(), 0.0);
    CHECK_THROWS_AS(model.project_image(encoded), DegenerateEmbeddingError);
    Tape::current().clear();
}

TEST_CASE("base projection head size reconciles the accounting") {
    const SizePreset base = size_preset("base");
    const std::vector<ParamSpec> schema = schema_params(base, {});
    std::int64_t projection_params = 0;
    for (const ParamSpec& spec : schema) {
        if (spec.path == "head.image_proj.weight" || spec.path == "head.text_proj.weight") {
            projection_params += numel(spec.shape);
        }
    }
    CHECK(projection_params == 2 * 768 * 256);
}

TEST_CASE("adapter path detection inspects segments") {
    CHECK(is_adapter_path("text.layer.0.adapter1.down.weight"));
    CHECK(is_adapter_path("image.deep_adapter.0.mlp.fc2.bias"));
    CHECK(!is_adapter_path("text.layer.0.attn.q.weight"));
    CHECK(!is_adapter_path("image.patch_embedding.weight"));
}

TEST_CASE("tower config invariants are enforced") {
    TowerConfig bad = size_preset("tiny").image;
    bad.heads = 3;  // 128 % 3 != 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    TowerConfig bad_image = size_preset("tiny").image;
    bad_image.patch_size = 7;
    CHECK_THROWS_AS(bad_image.validate(), ConfigError);
}
