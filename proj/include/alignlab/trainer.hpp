#pragma once

#include <filesystem>

#include "alignlab/config.hpp"
#include "alignlab/contrastive.hpp"
#include "alignlab/corpus.hpp"
#include "alignlab/encoder.hpp"
#include "alignlab/freeze.hpp"

namespace alignlab {

struct TrainResult {
    std::filesystem::path run_dir;
    std::filesystem::path manifest_path;
    std::filesystem::path metrics_path;
    std::filesystem::path initial_checkpoint;
    std::filesystem::path final_checkpoint;
    ParamAccounting accounting;
    std::int64_t steps = 0;
    double final_loss = 0.0;
    DualEncoder model;
    Corpus corpus;
};

// Builds the corpus (or loads config.corpus_dir), resolves the preset recipe
// and runs the training loop. Deterministic given the config: two runs with
// the same resolved configuration produce byte-identical checkpoints and
// metrics. Aborts with NumericsError when the loss goes non-finite.
TrainResult train(const TrainConfig& config, const CorpusSpec& corpus_spec);

// Same loop with an explicit recipe and an already-built corpus (used by the
// progressive-locking sweep, which modifies plans layer by layer).
TrainResult train_with_recipe(const TrainConfig& config, const PresetRecipe& recipe, Corpus corpus);

// Model assembly shared by the trainer and schema consumers: build, insert
// the recipe's adapters, apply its plan, then apply the paper-literal
// temperature override if requested.
DualEncoder assemble_model(const SizePreset& size, std::uint64_t seed, const PresetRecipe& recipe,
                           bool paper_literal);

}  // namespace alignlab
