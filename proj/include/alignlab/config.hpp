#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "alignlab/corpus.hpp"

namespace alignlab {

// Flat "key = value" text with [section] headers; '#' and ';' start comments.
// Keys are returned as "section.key".
std::map<std::string, std::string> parse_ini(const std::string& text);
std::map<std::string, std::string> parse_ini_file(const std::filesystem::path& path);

struct TrainConfig {
    std::string preset = "lilt_lwa";
    std::string size = "tiny";
    int batch_size = 64;
    int epochs = 30;
    int warmup_epochs = -1;  // -1: two thirds of the epochs
    double base_lr = 1e-4;
    double final_lr = 1e-5;
    double weight_decay = 0.02;
    std::uint64_t seed = 42;
    bool paper_literal = false;
    int checkpoint_every = 0;  // epochs between periodic checkpoints, 0 = endpoints only
    std::string out_dir;
    std::string corpus_dir;  // when set, load instead of generating

    int resolved_warmup_epochs() const { return warmup_epochs >= 0 ? warmup_epochs : (2 * epochs) / 3; }
    void validate() const;

    nlohmann::json to_json() const;
    static TrainConfig from_ini(const std::map<std::string, std::string>& values);
};

CorpusSpec corpus_spec_from_ini(const std::map<std::string, std::string>& values);

}  // namespace alignlab
