#pragma once

#include <optional>
#include <ostream>
#include <string>

namespace alignlab {

// Exit-code contract: 0 success, 2 usage/config error, 3 numerical failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerics = 3;

// Command-line overrides applied on top of a config file (or its defaults).
struct CliOverrides {
    std::optional<std::string> preset;
    std::optional<std::string> size;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<bool> paper_literal;
};

int cmd_gen_corpus(const std::string& spec_path, const std::string& out_dir, std::ostream& out, std::ostream& err);

int cmd_train(const std::string& config_path, const CliOverrides& overrides, std::ostream& out, std::ostream& err);

int cmd_eval(const std::string& checkpoint_path, const std::string& corpus_dir, const std::string& config_path,
             const std::string& report_path, const std::string& split, std::ostream& out, std::ostream& err);

int cmd_count_params(const std::string& preset, const std::string& size, std::ostream& out, std::ostream& err);

int cmd_analyze(const std::string& before_path, const std::string& after_path, const std::string& out_dir,
                std::ostream& out, std::ostream& err);

int cmd_lock_sweep(const std::string& config_path, int jobs, const CliOverrides& overrides, std::ostream& out,
                   std::ostream& err);

}  // namespace alignlab
