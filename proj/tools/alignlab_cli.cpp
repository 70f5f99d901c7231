#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "alignlab/cli_commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"desk-scale contrastive image-text alignment lab"};
    app.require_subcommand(1);

    std::string config_path, spec_path, out_path, checkpoint_path, corpus_dir, report_path, split = "eval";
    std::string before_path, after_path, preset, size = "base";
    int jobs = 1;
    bool paper_literal = false;
    std::uint64_t seed = 0;

    alignlab::CliOverrides overrides;
    const auto collect_overrides = [&](CLI::App* cmd) {
        cmd->add_option("--preset", preset, "training preset (row a-p name)");
        cmd->add_option("--size", size, "size preset or text:NAME,image:NAME");
        cmd->add_option("--seed", seed, "run seed");
        cmd->add_option("--out", out_path, "output directory");
        cmd->add_flag("--paper-literal", paper_literal, "fix the temperature at 1");
    };
    const auto finalize_overrides = [&](CLI::App* cmd) {
        if (cmd->count("--preset")) overrides.preset = preset;
        if (cmd->count("--size")) overrides.size = size;
        if (cmd->count("--seed")) overrides.seed = seed;
        if (cmd->count("--out")) overrides.out = out_path;
        if (cmd->count("--paper-literal")) overrides.paper_literal = paper_literal;
    };

    CLI::App* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
    gen->add_option("--spec", spec_path, "corpus spec file ([corpus] section)");
    gen->add_option("--out", out_path, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "train a preset on the synthetic corpus");
    train->add_option("--config", config_path, "config file ([train] and [corpus] sections)");
    collect_overrides(train);

    CLI::App* eval = app.add_subcommand("eval", "retrieval and zero-shot metrics for a checkpoint");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--corpus", corpus_dir, "corpus directory (from gen-corpus)");
    eval->add_option("--config", config_path, "config file to regenerate the corpus from");
    eval->add_option("--report", report_path, "report JSON path")->required();
    eval->add_option("--split", split, "eval | train | all");

    CLI::App* count = app.add_subcommand("count-params", "schema-only parameter accounting");
    count->add_option("--preset", preset, "preset name or 'all'")->required();
    count->add_option("--size", size, "size preset");

    CLI::App* analyze = app.add_subcommand("analyze", "layer-norm drift between two checkpoints");
    analyze->add_option("--before", before_path, "first checkpoint")->required();
    analyze->add_option("--after", after_path, "second checkpoint")->required();
    analyze->add_option("--out", out_path, "output directory")->required();

    CLI::App* sweep = app.add_subcommand("lock-sweep", "progressive LN locking experiment");
    sweep->add_option("--config", config_path, "config file");
    sweep->add_option("--jobs", jobs, "parallel training arms");
    collect_overrides(sweep);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : alignlab::kExitConfig;
    }

    if (gen->parsed()) {
        return alignlab::cmd_gen_corpus(spec_path, out_path, std::cout, std::cerr);
    }
    if (train->parsed()) {
        finalize_overrides(train);
        return alignlab::cmd_train(config_path, overrides, std::cout, std::cerr);
    }
    if (eval->parsed()) {
        return alignlab::cmd_eval(checkpoint_path, corpus_dir, config_path, report_path, split, std::cout, std::cerr);
    }
    if (count->parsed()) {
        return alignlab::cmd_count_params(preset, size, std::cout, std::cerr);
    }
    if (analyze->parsed()) {
        return alignlab::cmd_analyze(before_path, after_path, out_path, std::cout, std::cerr);
    }
    if (sweep->parsed()) {
        finalize_overrides(sweep);
        return alignlab::cmd_lock_sweep(config_path, jobs, overrides, std::cout, std::cerr);
    }
    return alignlab::kExitConfig;
}
