#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "alignlab/checkpoint.hpp"
#include "alignlab/config.hpp"
#include "alignlab/evaluation.hpp"

namespace alignlab {

// Sample Pearson correlation; throws CorrelationUndefinedError on zero
// variance in either series.
double pearson(std::span<const double> x, std::span<const double> y);

struct DriftEntry {
    std::string tower;     // image | text
    std::string sublayer;  // embed_ln | ln1 | ln2 | final_ln
    int layer = -1;        // 0-based; -1 for embed/final
    double gamma_l1 = 0.0;
    double beta_l1 = 0.0;
    double total_l1 = 0.0;
};

struct DriftReport {
    std::vector<DriftEntry> entries;
    // depth (1-based layer index) vs per-layer drift (ln1 + ln2 pooled)
    std::optional<double> pearson_image;
    std::optional<double> pearson_text;
    std::string correlation_note;  // set when a correlation is undefined

    nlohmann::json to_json() const;
    std::string to_csv() const;
};

// L1 movement of every host-tower layer-norm parameter pair between two
// checkpoints of the same architecture.
DriftReport ln_drift(const Container& before, const Container& after);

// --------------------------------------------------------------------------
// Progressive LN locking sweep
// --------------------------------------------------------------------------

// Pattern A locks the deepest k text LNs and the shallowest k image LNs;
// pattern B the reverse. k = 0 is the shared LN-training baseline.
struct LockSweepRow {
    std::string pattern;  // "A" | "B"
    int k = 0;
    RetrievalResult metrics;
    double final_loss = 0.0;
};

std::vector<LockSweepRow> progressive_lock_run(const TrainConfig& base_config, const CorpusSpec& corpus_spec,
                                               int jobs = 1);

nlohmann::json lock_sweep_to_json(const std::vector<LockSweepRow>& rows);
std::string lock_sweep_to_csv(const std::vector<LockSweepRow>& rows);

}  // namespace alignlab
