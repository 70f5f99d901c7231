#include "alignlab/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "alignlab/checkpoint.hpp"
#include "alignlab/optimizer.hpp"

namespace alignlab {

namespace {

std::string checkpoint_name(std::int64_t step) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "step-%06lld.ckpt", static_cast<long long>(step));
    return buffer;
}

double max_abs_grad(const DualEncoder& model) {
    double worst = 0.0;
    for (const auto& [path, tensor] : model.params()) {
        for (double g : tensor.grad()) {
            worst = std::max(worst, std::abs(g));
        }
    }
    return worst;
}

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buffer[32];
    std::strftime(buffer, sizeof(buffer), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buffer;
}

}  // namespace

DualEncoder assemble_model(const SizePreset& size, std::uint64_t seed, const PresetRecipe& recipe,
                           bool paper_literal) {
    DualEncoder model = DualEncoder::build(size, seed);
    for (const AdapterSpec& spec : recipe.adapters) {
        if (spec.kind == AdapterKind::layerwise) {
            model.insert_layerwise(spec);
        } else {
            model.insert_deep(spec);
        }
    }
    apply_plan(model, recipe.plan);
    if (paper_literal) {
        Tensor log_tau = model.param("head.log_tau");
        log_tau.values()[0] = 0.0;
        log_tau.set_requires_grad(false);
    }
    return model;
}

TrainResult train(const TrainConfig& config, const CorpusSpec& corpus_spec) {
    Corpus corpus = config.corpus_dir.empty() ? generate(corpus_spec) : load_corpus(config.corpus_dir);
    return train_with_recipe(config, preset_recipe(config.preset), std::move(corpus));
}

TrainResult train_with_recipe(const TrainConfig& config, const PresetRecipe& recipe, Corpus corpus) {
    config.validate();
    const SizePreset size = parse_size(config.size);
    if (corpus.vocab.size() > size.text.vocab_size) {
        throw ConfigError("corpus vocabulary (" + std::to_string(corpus.vocab.size()) +
                          " words) exceeds the text tower vocabulary (" + std::to_string(size.text.vocab_size) + ")");
    }

    const auto train_records = corpus.train_split();
    const std::int64_t steps_per_epoch =
        static_cast<std::int64_t>(train_records.size()) / static_cast<std::int64_t>(config.batch_size);
    if (steps_per_epoch == 0) {
        throw ConfigError("batch size " + std::to_string(config.batch_size) + " exceeds the training split of " +
                          std::to_string(train_records.size()) + " pairs");
    }

    DualEncoder model = assemble_model(size, config.seed, recipe, config.paper_literal);
    const ParamAccounting accounting = model_accounting(model);
    const bool anything_trainable = accounting.trainable_params > 0;

    TrainResult result;
    result.run_dir = config.out_dir;
    std::filesystem::create_directories(result.run_dir / "checkpoints");

    result.manifest_path = result.run_dir / "manifest.json";
    {
        const nlohmann::json manifest = {
            {"tool_version", kToolVersion},
            {"container_format_version", kContainerVersion},
            {"created_at", timestamp_utc()},
            {"train", config.to_json()},
            {"preset_plan", recipe.plan.to_json()},
            {"corpus_pairs", corpus.records.size()},
            {"corpus_seed", corpus.spec.seed},
            {"steps_per_epoch", steps_per_epoch},
            {"accounting", accounting.to_json()},
        };
        std::ofstream out(result.manifest_path, std::ios::trunc);
        out << manifest.dump(2) << "\n";
    }

    const nlohmann::json checkpoint_extra = {
        {"train_preset", recipe.name},
        {"paper_literal", config.paper_literal},
    };
    result.initial_checkpoint = result.run_dir / "checkpoints" / checkpoint_name(0);
    {
        nlohmann::json extra = checkpoint_extra;
        extra["step"] = 0;
        save_checkpoint(model, result.initial_checkpoint, extra);
    }

    Temperature temperature;
    temperature.log_tau = model.param("head.log_tau");
    temperature.paper_literal = config.paper_literal;

    Schedule schedule;
    schedule.base_lr = config.base_lr;
    schedule.final_lr = config.final_lr;
    schedule.warmup_epochs = config.resolved_warmup_epochs();
    schedule.total_epochs = config.epochs;
    schedule.steps_per_epoch = steps_per_epoch;

    AdamW optimizer(0.9, 0.999, 1e-8, config.weight_decay);

    result.metrics_path = result.run_dir / "metrics.jsonl";
    std::ofstream metrics(result.metrics_path, std::ios::trunc);
    if (!metrics) {
        throw ConfigError("cannot write metrics to '" + result.metrics_path.string() + "'");
    }

    std::int64_t global_step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches =
            batch_indices(train_records.size(), static_cast<std::size_t>(config.batch_size), config.seed, epoch);
        for (const auto& batch : batches) {
            ++global_step;
            const double lr = lr_at(schedule, global_step);

            Tensor pixels = batch_pixels(train_records, batch, corpus.spec);
            const auto tokens = batch_tokens(train_records, batch, corpus.vocab, size.text.max_seq_len);
            Tensor image_embeddings = model.project_image(model.encode_image(pixels));
            Tensor text_embeddings = model.project_text(model.encode_text(tokens));
            Tensor loss = total_loss(similarity(image_embeddings, text_embeddings), temperature);
            const double loss_value = loss.item();
            if (!std::isfinite(loss_value)) {
                const double worst = max_abs_grad(model);
                Tape::current().clear();
                throw NumericsError(global_step, lr, worst,
                                    "non-finite loss at step " + std::to_string(global_step) + " (lr " +
                                        std::to_string(lr) + ", max |grad| " + std::to_string(worst) + ")");
            }

            if (anything_trainable) {
                backward(loss);
                optimizer.step(model.params(), lr);
                for (auto& [path, tensor] : model.params()) {
                    tensor.zero_grad();
                }
            }
            Tape::current().clear();

            const nlohmann::json line = {
                {"step", global_step}, {"epoch", epoch},
                {"lr", lr},            {"loss", loss_value},
                {"percent_trained", accounting.percent_trained},
            };
            metrics << line.dump() << "\n";
            result.final_loss = loss_value;
        }
        const bool last_epoch = epoch + 1 == config.epochs;
        if (config.checkpoint_every > 0 && !last_epoch && (epoch + 1) % config.checkpoint_every == 0) {
            nlohmann::json extra = checkpoint_extra;
            extra["step"] = global_step;
            save_checkpoint(model, result.run_dir / "checkpoints" / checkpoint_name(global_step), extra);
        }
    }

    result.steps = global_step;
    result.final_checkpoint = result.run_dir / "checkpoints" / "final.ckpt";
    {
        nlohmann::json extra = checkpoint_extra;
        extra["step"] = global_step;
        save_checkpoint(model, result.final_checkpoint, extra);
    }
    result.accounting = accounting;
    result.model = std::move(model);
    result.corpus = std::move(corpus);
    return result;
}

}  // namespace alignlab
