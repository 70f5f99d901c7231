#include "alignlab/cli_commands.hpp"

#include <fstream>

#include <json.hpp>

#include "alignlab/analysis.hpp"
#include "alignlab/checkpoint.hpp"
#include "alignlab/config.hpp"
#include "alignlab/evaluation.hpp"
#include "alignlab/freeze.hpp"
#include "alignlab/trainer.hpp"

namespace alignlab {

namespace {

template <typename Fn>
int run_command(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const NumericsError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kExitNumerics;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}

TrainConfig load_train_config(const std::string& config_path, const CliOverrides& overrides,
                              CorpusSpec& corpus_spec) {
    std::map<std::string, std::string> values;
    if (!config_path.empty()) {
        values = parse_ini_file(config_path);
    }
    TrainConfig config = TrainConfig::from_ini(values);
    corpus_spec = corpus_spec_from_ini(values);
    if (overrides.preset) config.preset = *overrides.preset;
    if (overrides.size) config.size = *overrides.size;
    if (overrides.seed) config.seed = *overrides.seed;
    if (overrides.out) config.out_dir = *overrides.out;
    if (overrides.paper_literal) config.paper_literal = *overrides.paper_literal;
    return config;
}

}  // namespace

int cmd_gen_corpus(const std::string& spec_path, const std::string& out_dir, std::ostream& out, std::ostream& err) {
    return run_command(err, [&] {
        CorpusSpec spec;
        if (!spec_path.empty()) {
            spec = corpus_spec_from_ini(parse_ini_file(spec_path));
        }
        const Corpus corpus = generate(spec);
        save_corpus(corpus, out_dir);
        out << corpus.records.size() << " pairs written to " << out_dir << "\n";
        return kExitOk;
    });
}

int cmd_train(const std::string& config_path, const CliOverrides& overrides, std::ostream& out, std::ostream& err) {
    return run_command(err, [&] {
        CorpusSpec corpus_spec;
        const TrainConfig config = load_train_config(config_path, overrides, corpus_spec);
        const TrainResult result = train(config, corpus_spec);
        out << "trained " << config.preset << " for " << result.steps << " steps; final loss " << result.final_loss
            << "\n"
            << "final checkpoint: " << result.final_checkpoint.string() << "\n";
        return kExitOk;
    });
}

int cmd_eval(const std::string& checkpoint_path, const std::string& corpus_dir, const std::string& config_path,
             const std::string& report_path, const std::string& split, std::ostream& out, std::ostream& err) {
    return run_command(err, [&] {
        LoadedCheckpoint loaded = load_checkpoint(checkpoint_path);
        Corpus corpus;
        if (!corpus_dir.empty()) {
            corpus = load_corpus(corpus_dir);
        } else {
            CorpusSpec spec;
            if (!config_path.empty()) {
                spec = corpus_spec_from_ini(parse_ini_file(config_path));
            }
            corpus = generate(spec);
        }
        if (corpus.vocab.size() > loaded.model.preset().text.vocab_size) {
            throw ConfigError("corpus vocabulary does not fit the checkpoint's text tower");
        }

        std::span<const PairRecord> records;
        if (split == "eval") {
            records = corpus.eval_split();
        } else if (split == "train") {
            records = corpus.train_split();
        } else if (split == "all") {
            records = corpus.records;
        } else {
            throw ConfigError("unknown split '" + split + "' (want eval, train or all)");
        }

        const SplitEvaluation evaluation = evaluate_split(loaded.model, records, corpus);
        nlohmann::json report = evaluation.to_json();
        report["preset"] = loaded.metadata.value("train_preset", "");
        report["seed"] = loaded.metadata.value("seed", std::uint64_t{0});
        report["split"] = split;
        report["pairs"] = records.size();

        std::ofstream file(report_path, std::ios::trunc);
        if (!file) {
            throw ConfigError("cannot write report to '" + report_path + "'");
        }
        file << report.dump(2) << "\n";
        out << report.dump(2) << "\n";
        return kExitOk;
    });
}

int cmd_count_params(const std::string& preset, const std::string& size, std::ostream& out, std::ostream& err) {
    return run_command(err, [&] {
        const SizePreset size_config = parse_size(size);
        const auto count_one = [&size_config](const std::string& name) {
            const PresetRecipe recipe = preset_recipe(name);
            AdapterState adapters;
            for (const AdapterSpec& spec : recipe.adapters) {
                (spec.kind == AdapterKind::layerwise ? adapters.layerwise : adapters.deep) = spec;
            }
            nlohmann::json j = schema_count(size_config, adapters, recipe.plan).to_json();
            j["preset"] = name;
            j["size"] = size_config.name;
            return j;
        };
        if (preset == "all") {
            nlohmann::json all = nlohmann::json::array();
            for (const std::string& name : preset_names()) {
                all.push_back(count_one(name));
            }
            out << all.dump(2) << "\n";
        } else {
            out << count_one(preset).dump(2) << "\n";
        }
        return kExitOk;
    });
}

int cmd_analyze(const std::string& before_path, const std::string& after_path, const std::string& out_dir,
                std::ostream& out, std::ostream& err) {
    return run_command(err, [&] {
        const Container before = read_container(before_path);
        const Container after = read_container(after_path);
        const DriftReport report = ln_drift(before, after);

        std::filesystem::create_directories(out_dir);
        const auto json_path = std::filesystem::path(out_dir) / "drift.json";
        const auto csv_path = std::filesystem::path(out_dir) / "drift.csv";
        std::ofstream json_file(json_path, std::ios::trunc);
        json_file << report.to_json().dump(2) << "\n";
        std::ofstream csv_file(csv_path, std::ios::trunc);
        csv_file << report.to_csv();

        out << report.to_json().dump(2) << "\n";
        return kExitOk;
    });
}

int cmd_lock_sweep(const std::string& config_path, int jobs, const CliOverrides& overrides, std::ostream& out,
                   std::ostream& err) {
    return run_command(err, [&] {
        CorpusSpec corpus_spec;
        const TrainConfig config = load_train_config(config_path, overrides, corpus_spec);
        const std::vector<LockSweepRow> rows = progressive_lock_run(config, corpus_spec, jobs);

        std::filesystem::create_directories(config.out_dir);
        std::ofstream json_file(std::filesystem::path(config.out_dir) / "lock_sweep.json", std::ios::trunc);
        json_file << lock_sweep_to_json(rows).dump(2) << "\n";
        std::ofstream csv_file(std::filesystem::path(config.out_dir) / "lock_sweep.csv", std::ios::trunc);
        csv_file << lock_sweep_to_csv(rows);

        out << lock_sweep_to_csv(rows);
        return kExitOk;
    });
}

}  // namespace alignlab
