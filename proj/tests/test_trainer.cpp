#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "alignlab/checkpoint.hpp"
#include "alignlab/optimizer.hpp"
#include "alignlab/trainer.hpp"

using namespace alignlab;

namespace {

std::filesystem::path test_dir() {
    const auto dir = std::filesystem::temp_directory_path() / "alignlab_test_trainer";
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream file(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()};
}

TrainConfig micro_config(const std::string& run_name) {
    TrainConfig config;
    config.preset = "lilt_ln";
    config.size = "tiny";
    config.batch_size = 8;
    config.epochs = 2;
    config.warmup_epochs = 1;
    config.seed = 11;
    config.out_dir = (test_dir() / run_name).string();
    return config;
}

CorpusSpec micro_corpus() {
    CorpusSpec spec;
    spec.n_pairs = 32;
    spec.seed = 13;
    return spec;
}

std::map<std::string, Tensor> single_param(double value, bool with_zero_grad) {
    Tensor w = Tensor::from_values({1}, {value});
    w.set_requires_grad(true).set_param_path("tower.weight");
    if (with_zero_grad) {
        Tape::current().clear();
        backward(sum(mul(w, Tensor::zeros({1}))));
        Tape::current().clear();
    }
    return {{"tower.weight", w}};
}

}  // namespace

TEST_CASE("first adamw step on a quadratic matches the closed form") {
    PrecisionGuard precision(Precision::f64);
    Tensor w = Tensor::from_values({1}, {1.0});
    w.set_requires_grad(true).set_param_path("tower.weight");
    std::map<std::string, Tensor> params = {{"tower.weight", w}};

    Tape::current().clear();
    backward(sum(mul(w, w)));  // f(w) = w^2, grad 2
    Tape::current().clear();

    AdamW optimizer(0.9, 0.999, 1e-8, 0.0);
    optimizer.step(params, 0.1);
    // m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps) ~ lr
    CHECK(std::abs(w.values()[0] - 0.9) < 1e-6);
}

TEST_CASE("weight decay alone shrinks by exactly (1 - lr wd)") {
    PrecisionGuard precision(Precision::f64);
    auto params = single_param(2.0, /*with_zero_grad=*/true);
    AdamW optimizer(0.9, 0.999, 1e-8, 0.02);
    optimizer.step(params, 0.5);
    CHECK(params.at("tower.weight").values()[0] == 2.0 * (1.0 - 0.5 * 0.02));
}

TEST_CASE("layer norms, biases and the temperature skip weight decay") {
    PrecisionGuard precision(Precision::f64);
    for (const std::string path : {"text.layer.0.ln1.gamma", "text.layer.0.ln1.beta",
                                   "text.layer.0.attn.q.bias", "head.log_tau"}) {
        Tensor w = Tensor::from_values({1}, {2.0});
        w.set_requires_grad(true).set_param_path(path);
        std::map<std::string, Tensor> params = {{path, w}};
        Tape::current().clear();
        backward(sum(mul(w, Tensor::zeros({1}))));
        Tape::current().clear();
        AdamW optimizer(0.9, 0.999, 1e-8, 0.02);
        optimizer.step(params, 0.5);
        CHECK(params.at(path).values()[0] == 2.0);
    }
}

TEST_CASE("frozen parameters are never touched and carry no state") {
    Tensor w = Tensor::from_values({2}, {1.0, -1.0});
    w.set_param_path("tower.weight");  // requires_grad stays false
    std::map<std::string, Tensor> params = {{"tower.weight", w}};
    AdamW optimizer(0.9, 0.999, 1e-8, 0.02);
    for (int step = 0; step < 5; ++step) optimizer.step(params, 0.1);
    CHECK(w.values()[0] == 1.0);
    CHECK(w.values()[1] == -1.0);
    CHECK(optimizer.state_paths().empty());
}

TEST_CASE("a trainable parameter without a gradient is a contract violation") {
    auto params = single_param(1.0, /*with_zero_grad=*/false);
    AdamW optimizer;
    CHECK_THROWS_AS(optimizer.step(params, 0.1), ContractError);
}

TEST_CASE("optimizer state exists exactly for the trainable set") {
    PrecisionGuard precision(Precision::f64);
    DualEncoder model = DualEncoder::build(size_preset("tiny"), 3);
    apply_plan(model, preset_recipe("lilt_ln").plan);

    // one real step through the model
    Corpus corpus = generate(micro_corpus());
    const auto batches = batch_indices(corpus.records.size(), 8, 1, 0);
    Tensor pixels = batch_pixels(corpus.records, batches[0], corpus.spec);
    const auto tokens = batch_tokens(corpus.records, batches[0], corpus.vocab, 16);
    Temperature tau;
    tau.log_tau = model.param("head.log_tau");
    Tape::current().clear();
    Tensor loss = total_loss(similarity(model.project_image(model.encode_image(pixels)),
                                        model.project_text(model.encode_text(tokens))),
                             tau);
    backward(loss);
    AdamW optimizer(0.9, 0.999, 1e-8, 0.02);
    optimizer.step(model.params(), 1e-3);
    Tape::current().clear();

    std::vector<std::string> trainable = model.trainable_paths();
    std::vector<std::string> state = optimizer.state_paths();
    std::sort(trainable.begin(), trainable.end());
    std::sort(state.begin(), state.end());
    CHECK(trainable == state);
}

TEST_CASE("schedule endpoints and midpoints") {
    Schedule schedule;
    schedule.base_lr = 1e-4;
    schedule.final_lr = 1e-5;
    schedule.warmup_epochs = 2;
    schedule.total_epochs = 6;
    schedule.steps_per_epoch = 10;

    CHECK(lr_at(schedule, 0) == 0.0);
    CHECK(lr_at(schedule, 20) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(lr_at(schedule, 10) == doctest::Approx(5e-5).epsilon(1e-12));
    CHECK(lr_at(schedule, 60) == doctest::Approx(1e-5).epsilon(1e-12));
    // midpoint of the decay phase
    CHECK(lr_at(schedule, 40) == doctest::Approx((1e-4 + 1e-5) / 2).epsilon(1e-12));
    // after the schedule ends, stay at the final rate
    CHECK(lr_at(schedule, 100) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(schedule, -1), ContractError);
}

TEST_CASE("initial loss sits near ln(batch) in paper-literal mode") {
    // near-isotropic random embeddings: every similarity is close to 0, so the
    // loss starts near the uniform-softmax value
    double total_deviation = 0.0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        TrainConfig config = micro_config("loss_probe_" + std::to_string(seed));
        config.preset = "frozen";
        config.epochs = 1;
        config.warmup_epochs = 0;
        config.paper_literal = true;
        config.seed = seed;
        const TrainResult result = train(config, micro_corpus());

        std::ifstream metrics(result.metrics_path);
        std::string first_line;
        REQUIRE(std::getline(metrics, first_line));
        const double loss = nlohmann::json::parse(first_line).at("loss");
        const double deviation = std::abs(loss - std::log(8.0));
        CHECK(deviation < 0.2);
        total_deviation += deviation;
    }
    CHECK(total_deviation / 10.0 < 0.1);
}

TEST_CASE("training is bit-deterministic given the config") {
    const TrainConfig config_a = micro_config("determinism_a");
    const TrainConfig config_b = micro_config("determinism_b");
    const TrainResult a = train(config_a, micro_corpus());
    const TrainResult b = train(config_b, micro_corpus());

    CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
    CHECK(slurp(a.initial_checkpoint) == slurp(b.initial_checkpoint));
    CHECK(slurp(a.final_checkpoint) == slurp(b.final_checkpoint));
    CHECK(!slurp(a.final_checkpoint).empty());
}

TEST_CASE("training respects the freeze plan end to end") {
    TrainConfig config = micro_config("freeze_respect");
    config.preset = "lilt_ln";
    const TrainResult result = train(config, micro_corpus());
    const PresetRecipe recipe = preset_recipe("lilt_ln");
    const FrozenReport report = verify_frozen(read_container(result.initial_checkpoint),
                                              read_container(result.final_checkpoint), recipe.plan);
    CHECK(report.frozen_params > 0);
    // the trainable groups actually moved
    CHECK(report.max_change_by_group.at("ln") > 0.0);
    CHECK(report.max_change_by_group.at("projection") > 0.0);
}

TEST_CASE("the frozen preset evaluates but never changes anything") {
    TrainConfig config = micro_config("all_frozen");
    config.preset = "frozen";
    const TrainResult result = train(config, micro_corpus());
    const Container initial = read_container(result.initial_checkpoint);
    const Container final = read_container(result.final_checkpoint);
    REQUIRE(initial.entries.size() == final.entries.size());
    for (const auto& [path, entry] : initial.entries) {
        CHECK(final.entries.at(path).raw == entry.raw);
    }
    const FrozenReport report = verify_frozen(initial, final, preset_recipe("frozen").plan);
    CHECK(report.trainable_params == 0);
}

TEST_CASE("checkpoints round-trip byte-identically and rebuild adapters") {
    TrainConfig config = micro_config("roundtrip");
    config.preset = "lilt_lwa";
    config.epochs = 1;
    const TrainResult result = train(config, micro_corpus());

    const LoadedCheckpoint loaded = load_checkpoint(result.final_checkpoint);
    CHECK(loaded.model.adapters().layerwise.has_value());
    CHECK(loaded.model.params().contains("text.layer.0.adapter1.down.weight"));
    CHECK(loaded.metadata.at("train_preset") == "lilt_lwa");

    const auto resaved = test_dir() / "resaved.ckpt";
    save_checkpoint(loaded.model, resaved, {{"step", loaded.metadata.at("step")},
                                            {"train_preset", loaded.metadata.at("train_preset")},
                                            {"paper_literal", loaded.metadata.at("paper_literal")}});
    CHECK(slurp(result.final_checkpoint) == slurp(resaved));
}

TEST_CASE("unknown checkpoint versions and truncations are rejected") {
    const auto dir = test_dir();
    DualEncoder model = DualEncoder::build(size_preset("tiny"), 9);
    const auto path = dir / "version_probe.ckpt";
    save_checkpoint(model, path, {{"step", 0}});

    const std::string pristine = slurp(path);

    // bump the version field (bytes 8..11)
    std::string bytes = pristine;
    bytes[8] = 2;
    const auto bumped = dir / "version_bumped.ckpt";
    std::ofstream(bumped, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    try {
        load_checkpoint(bumped);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    // truncate mid-payload
    const auto truncated = dir / "truncated.ckpt";
    std::ofstream(truncated, std::ios::binary)
        .write(pristine.data(), static_cast<std::streamsize>(pristine.size() / 2));
    try {
        load_checkpoint(truncated);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }

    // wrong magic
    bytes = pristine;
    bytes[0] = 'X';
    const auto mangled = dir / "mangled.ckpt";
    std::ofstream(mangled, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_checkpoint(mangled), FormatError);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
    TrainConfig config = micro_config("nan_abort");
    config.preset = "clip";
    config.base_lr = 1e15;  // first update catapults log_tau; the next loss overflows
    config.final_lr = 1e15;
    config.warmup_epochs = 0;
    config.epochs = 2;
    try {
        train(config, micro_corpus());
        FAIL("expected NumericsError");
    } catch (const NumericsError& e) {
        CHECK(e.step > 0);
        CHECK(e.lr == 1e15);
        CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    }
}

TEST_CASE("config validation catches unusable settings") {
    TrainConfig config = micro_config("invalid");
    config.batch_size = 1;
    CHECK_THROWS_AS(config.validate(), ConfigError);
    config.batch_size = 64;
    config.out_dir = "";
    CHECK_THROWS_AS(config.validate(), ConfigError);

    TrainConfig oversized = micro_config("oversized_batch");
    oversized.batch_size = 1000;  // larger than the training split
    CHECK_THROWS_AS(train(oversized, micro_corpus()), ConfigError);

    TrainConfig unknown = micro_config("unknown_preset");
    unknown.preset = "nonsense";
    CHECK_THROWS_AS(train(unknown, micro_corpus()), ConfigError);
}

TEST_CASE("paper-literal mode pins the temperature at one") {
    TrainConfig config = micro_config("paper_literal");
    config.preset = "lilt_ln";
    config.paper_literal = true;
    config.epochs = 1;
    const TrainResult result = train(config, micro_corpus());
    const LoadedCheckpoint loaded = load_checkpoint(result.final_checkpoint);
    CHECK(loaded.model.param("head.log_tau").values()[0] == 0.0);
    CHECK(loaded.metadata.at("paper_literal") == true);
}

TEST_CASE("periodic checkpoints appear on the configured cadence") {
    TrainConfig config = micro_config("periodic");
    config.epochs = 4;
    config.warmup_epochs = 2;
    config.checkpoint_every = 2;
    const TrainResult result = train(config, micro_corpus());
    int checkpoint_files = 0;
    for (const auto& entry : std::filesystem::directory_iterator(result.run_dir / "checkpoints")) {
        checkpoint_files += entry.path().extension() == ".ckpt";
    }
    // step 0, one periodic (after epoch 2), final
    CHECK(checkpoint_files == 3);
}
