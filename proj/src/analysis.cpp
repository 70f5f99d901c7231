#include "alignlab/analysis.hpp"

#include <cmath>
#include <mutex>
#include <sstream>
#include <thread>

#include "alignlab/trainer.hpp"

namespace alignlab {

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ContractError("pearson: need two equal-length series of at least 2 points");
    }
    const double n = static_cast<double>(x.size());
    double mean_x = 0.0, mean_y = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mean_x += x[i];
        mean_y += y[i];
    }
    mean_x /= n;
    mean_y /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mean_x;
        const double dy = y[i] - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw CorrelationUndefinedError("pearson: zero variance in a series");
    }
    return sxy / std::sqrt(sxx * syy);
}

// --------------------------------------------------------------------------
// LN drift
// --------------------------------------------------------------------------

namespace {

double l1_diff(const StoredTensor& a, const StoredTensor& b) {
    const std::vector<double> va = a.to_doubles();
    const std::vector<double> vb = b.to_doubles();
    double total = 0.0;
    for (std::size_t i = 0; i < va.size(); ++i) {
        total += std::abs(vb[i] - va[i]);
    }
    return total;
}

const StoredTensor& entry_of(const Container& container, const std::string& path) {
    const auto it = container.entries.find(path);
    if (it == container.entries.end()) {
        throw ComparisonError("checkpoint is missing '" + path + "'");
    }
    return it->second;
}

DriftEntry drift_entry(const Container& before, const Container& after, const std::string& tower,
                       const std::string& sublayer, int layer, const std::string& prefix) {
    DriftEntry entry;
    entry.tower = tower;
    entry.sublayer = sublayer;
    entry.layer = layer;
    entry.gamma_l1 = l1_diff(entry_of(before, prefix + ".gamma"), entry_of(after, prefix + ".gamma"));
    entry.beta_l1 = l1_diff(entry_of(before, prefix + ".beta"), entry_of(after, prefix + ".beta"));
    entry.total_l1 = entry.gamma_l1 + entry.beta_l1;
    return entry;
}

}  // namespace

DriftReport ln_drift(const Container& before, const Container& after) {
    if (!before.metadata.contains("preset") || !after.metadata.contains("preset") ||
        before.metadata.at("preset") != after.metadata.at("preset")) {
        throw ComparisonError("checkpoints do not share an architecture");
    }
    const SizePreset preset = size_preset_from_json(before.metadata.at("preset"));

    DriftReport report;
    std::vector<double> depth_series, drift_series;
    const auto tower_entries = [&](const std::string& tower, const TowerConfig& config,
                                   std::optional<double>& correlation) {
        const std::string root = tower + ".";
        report.entries.push_back(drift_entry(before, after, tower, "embed_ln", -1, root + "embed_ln"));
        depth_series.clear();
        drift_series.clear();
        for (int i = 0; i < config.depth; ++i) {
            const std::string layer_root = root + "layer." + std::to_string(i) + ".";
            const DriftEntry ln1 = drift_entry(before, after, tower, "ln1", i, layer_root + "ln1");
            const DriftEntry ln2 = drift_entry(before, after, tower, "ln2", i, layer_root + "ln2");
            report.entries.push_back(ln1);
            report.entries.push_back(ln2);
            depth_series.push_back(static_cast<double>(i + 1));
            drift_series.push_back(ln1.total_l1 + ln2.total_l1);
        }
        report.entries.push_back(drift_entry(before, after, tower, "final_ln", -1, root + "final_ln"));
        try {
            correlation = pearson(depth_series, drift_series);
        } catch (const CorrelationUndefinedError& e) {
            correlation.reset();
            report.correlation_note = e.what();
        }
    };
    tower_entries("image", preset.image, report.pearson_image);
    tower_entries("text", preset.text, report.pearson_text);
    return report;
}

nlohmann::json DriftReport::to_json() const {
    nlohmann::json entries_json = nlohmann::json::array();
    for (const DriftEntry& entry : entries) {
        entries_json.push_back({
            {"tower", entry.tower},
            {"sublayer", entry.sublayer},
            {"layer", entry.layer},
            {"gamma_l1", entry.gamma_l1},
            {"beta_l1", entry.beta_l1},
            {"total_l1", entry.total_l1},
        });
    }
    nlohmann::json j = {{"entries", entries_json}};
    j["pearson_image"] = pearson_image ? nlohmann::json(*pearson_image) : nlohmann::json();
    j["pearson_text"] = pearson_text ? nlohmann::json(*pearson_text) : nlohmann::json();
    j["correlation_defined"] = pearson_image.has_value() && pearson_text.has_value();
    if (!correlation_note.empty()) {
        j["correlation_note"] = correlation_note;
    }
    return j;
}

std::string DriftReport::to_csv() const {
    std::ostringstream out;
    out << "tower,layer,sublayer,gamma_l1,beta_l1,total_l1\n";
    out.precision(17);
    for (const DriftEntry& entry : entries) {
        out << entry.tower << ",";
        if (entry.layer >= 0) {
            out << entry.layer + 1;
        } else {
            out << entry.sublayer;
        }
        out << "," << entry.sublayer << "," << entry.gamma_l1 << "," << entry.beta_l1 << "," << entry.total_l1
            << "\n";
    }
    return out.str();
}

// --------------------------------------------------------------------------
// Progressive locking
// --------------------------------------------------------------------------

namespace {

// LN-training recipe with the pattern's layers removed from the unlocked set.
PresetRecipe locked_ln_recipe(const std::string& pattern, int k, int depth) {
    PresetRecipe recipe;
    recipe.name = "lilt_ln/lock-" + pattern + "-" + std::to_string(k);

    const auto text_locked = [&](int layer) {
        return pattern == "A" ? layer >= depth - k : layer < k;
    };
    const auto image_locked = [&](int layer) {
        return pattern == "A" ? layer < k : layer >= depth - k;
    };

    std::vector<std::string> patterns = {"head.*", "image.embed_ln.*", "image.final_ln.*", "text.embed_ln.*",
                                         "text.final_ln.*"};
    for (int i = 0; i < depth; ++i) {
        if (!text_locked(i)) {
            patterns.push_back("text.layer." + std::to_string(i) + ".ln*");
        }
        if (!image_locked(i)) {
            patterns.push_back("image.layer." + std::to_string(i) + ".ln*");
        }
    }
    recipe.plan.unlocked_patterns = std::move(patterns);
    recipe.plan.description = "LN training with " + std::to_string(k) + " layers locked (pattern " + pattern + ")";
    return recipe;
}

}  // namespace

std::vector<LockSweepRow> progressive_lock_run(const TrainConfig& base_config, const CorpusSpec& corpus_spec,
                                               int jobs) {
    const SizePreset size = parse_size(base_config.size);
    if (size.image.depth != size.text.depth) {
        throw ConfigError("the locking sweep expects towers of equal depth");
    }
    const int depth = size.image.depth;

    struct Arm {
        std::string pattern;
        int k;
    };
    std::vector<Arm> arms;
    for (const char* pattern : {"A", "B"}) {
        for (int k = 0; k <= depth; ++k) {
            arms.push_back({pattern, k});
        }
    }

    const Corpus corpus = generate(corpus_spec);
    std::vector<LockSweepRow> rows(arms.size());
    std::mutex next_mutex;
    std::size_t next = 0;
    std::exception_ptr failure;
    const auto worker = [&] {
        for (;;) {
            std::size_t index;
            {
                std::lock_guard<std::mutex> lock(next_mutex);
                if (failure || next >= arms.size()) return;
                index = next++;
            }
            try {
                const Arm& arm = arms[index];
                TrainConfig config = base_config;
                config.preset = "lilt_ln";
                config.out_dir = (std::filesystem::path(base_config.out_dir) /
                                  ("arm_" + arm.pattern + "_" + std::to_string(arm.k)))
                                     .string();
                TrainResult outcome =
                    train_with_recipe(config, locked_ln_recipe(arm.pattern, arm.k, depth), corpus);
                const SplitEvaluation evaluation =
                    evaluate_split(outcome.model, outcome.corpus.eval_split(), outcome.corpus);
                rows[index] = {arm.pattern, arm.k, evaluation.retrieval, outcome.final_loss};
            } catch (...) {
                std::lock_guard<std::mutex> lock(next_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };

    const int threads = std::max(1, jobs);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& thread : pool) thread.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
    return rows;
}

nlohmann::json lock_sweep_to_json(const std::vector<LockSweepRow>& rows) {
    nlohmann::json out = nlohmann::json::array();
    for (const LockSweepRow& row : rows) {
        nlohmann::json j = row.metrics.to_json();
        j["pattern"] = row.pattern;
        j["k"] = row.k;
        j["final_loss"] = row.final_loss;
        out.push_back(j);
    }
    return out;
}

std::string lock_sweep_to_csv(const std::vector<LockSweepRow>& rows) {
    std::ostringstream out;
    out << "pattern,k,tr1,tr5,tr10,ir1,ir5,ir10,mean_tr,mean_ir,final_loss\n";
    out.precision(17);
    for (const LockSweepRow& row : rows) {
        out << row.pattern << "," << row.k;
        for (int rank : {1, 5, 10}) out << "," << row.metrics.tr_at.at(rank);
        for (int rank : {1, 5, 10}) out << "," << row.metrics.ir_at.at(rank);
        out << "," << row.metrics.mean_tr << "," << row.metrics.mean_ir << "," << row.final_loss << "\n";
    }
    return out.str();
}

}  // namespace alignlab
