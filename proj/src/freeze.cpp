#include "alignlab/freeze.hpp"

#include <algorithm>
#include <cmath>

namespace alignlab {

bool glob_match(const std::string& pattern, const std::string& path) {
    std::size_t pi = 0, si = 0;
    std::size_t star = std::string::npos, rewind = 0;
    while (si < path.size()) {
        if (pi < pattern.size() && pattern[pi] == '*') {
            star = pi++;
            rewind = si;
        } else if (pi < pattern.size() && pattern[pi] == path[si]) {
            ++pi;
            ++si;
        } else if (star != std::string::npos) {
            pi = star + 1;
            si = ++rewind;
        } else {
            return false;
        }
    }
    while (pi < pattern.size() && pattern[pi] == '*') ++pi;
    return pi == pattern.size();
}

bool plan_unlocks(const FreezePlan& plan, const std::string& path) {
    if (is_adapter_path(path)) {
        return true;
    }
    return std::any_of(plan.unlocked_patterns.begin(), plan.unlocked_patterns.end(),
                       [&path](const std::string& p) { return glob_match(p, path); });
}

std::string param_group(const std::string& path) {
    if (is_adapter_path(path)) return "adapter";
    if (path == "head.log_tau") return "temperature";
    if (path.starts_with("head.")) return "projection";
    if (path.ends_with(".gamma") || path.ends_with(".beta")) return "ln";
    if (path.ends_with(".bias")) return "bias";
    return "tower";
}

nlohmann::json FreezePlan::to_json() const {
    return {{"description", description}, {"unlocked_patterns", unlocked_patterns}};
}

nlohmann::json ParamAccounting::to_json() const {
    nlohmann::json groups_json;
    for (const auto& [name, count] : groups) {
        groups_json[name] = {{"total", count.total}, {"trainable", count.trainable}};
    }
    return {
        {"total_params", total_params},
        {"trainable_params", trainable_params},
        {"percent_trained", percent_trained},
        {"percent_trained_host_denominator", percent_trained_host_denominator},
        {"groups", groups_json},
    };
}

namespace {

ParamAccounting accumulate(const std::vector<std::pair<std::string, std::int64_t>>& sized_paths,
                           const std::function<bool(const std::string&)>& trainable) {
    ParamAccounting acc;
    std::int64_t adapter_total = 0;
    for (const auto& [path, count] : sized_paths) {
        const std::string group = param_group(path);
        acc.total_params += count;
        acc.groups[group].total += count;
        if (group == "adapter") adapter_total += count;
        if (trainable(path)) {
            acc.trainable_params += count;
            acc.groups[group].trainable += count;
        }
    }
    if (acc.total_params > 0) {
        acc.percent_trained = 100.0 * static_cast<double>(acc.trainable_params) / static_cast<double>(acc.total_params);
    }
    const std::int64_t host_total = acc.total_params - adapter_total;
    if (host_total > 0) {
        acc.percent_trained_host_denominator =
            100.0 * static_cast<double>(acc.trainable_params) / static_cast<double>(host_total);
    }
    return acc;
}

}  // namespace

ParamAccounting schema_count(const SizePreset& preset, const AdapterState& adapters, const FreezePlan& plan) {
    const std::vector<ParamSpec> specs = schema_params(preset, adapters);
    std::vector<std::pair<std::string, std::int64_t>> sized;
    sized.reserve(specs.size());
    for (const ParamSpec& spec : specs) {
        sized.emplace_back(spec.path, numel(spec.shape));
    }
    for (const std::string& pattern : plan.unlocked_patterns) {
        const bool hit = std::any_of(specs.begin(), specs.end(),
                                     [&pattern](const ParamSpec& s) { return glob_match(pattern, s.path); });
        if (!hit) {
            throw PlanError("pattern '" + pattern + "' matches no parameter path");
        }
    }
    return accumulate(sized, [&plan](const std::string& path) { return plan_unlocks(plan, path); });
}

ParamAccounting model_accounting(const DualEncoder& model) {
    std::vector<std::pair<std::string, std::int64_t>> sized;
    sized.reserve(model.params().size());
    for (const auto& [path, tensor] : model.params()) {
        sized.emplace_back(path, tensor.size());
    }
    return accumulate(sized, [&model](const std::string& path) { return model.param(path).requires_grad(); });
}

ApplyReport apply_plan(DualEncoder& model, const FreezePlan& plan) {
    ApplyReport report;
    for (const std::string& pattern : plan.unlocked_patterns) {
        bool hit = false;
        for (const auto& [path, tensor] : model.params()) {
            if (glob_match(pattern, path)) {
                hit = true;
                break;
            }
        }
        if (!hit) {
            report.unmatched_patterns.push_back(pattern);
        }
    }
    for (auto& [path, tensor] : model.params()) {
        const bool on = plan_unlocks(plan, path);
        tensor.set_requires_grad(on);
        if (on) {
            report.trainable_params += tensor.size();
        }
    }
    return report;
}

// --------------------------------------------------------------------------
// Presets
// --------------------------------------------------------------------------

namespace {

const std::vector<std::string> kLnPatterns = {"*ln*.gamma", "*ln*.beta"};
const std::vector<std::string> kBiasPatterns = {"*.bias", "*.beta"};

FreezePlan make_plan(std::vector<std::string> patterns, std::string description) {
    FreezePlan plan;
    plan.unlocked_patterns = std::move(patterns);
    plan.description = std::move(description);
    return plan;
}

std::vector<std::string> with_head(std::vector<std::string> patterns) {
    patterns.push_back("head.*");
    return patterns;
}

AdapterSpec layerwise_spec(AdapterTarget target) {
    AdapterSpec spec;
    spec.kind = AdapterKind::layerwise;
    spec.target = target;
    return spec;
}

AdapterSpec deep_spec(AdapterTarget target) {
    AdapterSpec spec;
    spec.kind = AdapterKind::deep;
    spec.target = target;
    return spec;
}

}  // namespace

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {
        "frozen",         "ln_only",        "projection_only", "lilt_ln",
        "lilt_bf",        "lilt_da_noln",   "lilt_da",         "lilt_lwa_noln",
        "lilt_lwa",       "lilt_lwa_bitfit", "lilt_da_bitfit", "lit",
        "lit_reversed",   "lit_plus_lilt_da", "lit_plus_lilt_lwa", "clip",
    };
    return names;
}

PresetRecipe preset_recipe(const std::string& name) {
    PresetRecipe recipe;
    recipe.name = name;
    if (name == "frozen") {
        recipe.plan = make_plan({}, "everything locked, including the temperature");
    } else if (name == "ln_only") {
        std::vector<std::string> patterns = kLnPatterns;
        patterns.push_back("head.log_tau");
        recipe.plan = make_plan(std::move(patterns), "layer-norm scales and biases of both towers");
    } else if (name == "projection_only") {
        recipe.plan = make_plan({"head.*"}, "projection heads and temperature only");
    } else if (name == "lilt_ln") {
        recipe.plan = make_plan(with_head(kLnPatterns), "layer norms plus projection heads");
    } else if (name == "lilt_bf") {
        recipe.plan = make_plan(with_head(kBiasPatterns), "every additive bias plus projection heads");
    } else if (name == "lilt_da_noln") {
        recipe.adapters = {deep_spec(AdapterTarget::both)};
        recipe.plan = make_plan({"head.*"}, "deep adapters plus projection heads, layer norms locked");
    } else if (name == "lilt_da") {
        recipe.adapters = {deep_spec(AdapterTarget::both)};
        recipe.plan = make_plan(with_head(kLnPatterns), "deep adapters, layer norms, projection heads");
    } else if (name == "lilt_lwa_noln") {
        recipe.adapters = {layerwise_spec(AdapterTarget::both)};
        recipe.plan = make_plan({"head.*"}, "layerwise adapters plus projection heads, layer norms locked");
    } else if (name == "lilt_lwa") {
        recipe.adapters = {layerwise_spec(AdapterTarget::both)};
        recipe.plan = make_plan(with_head(kLnPatterns), "layerwise adapters, layer norms, projection heads");
    } else if (name == "lilt_lwa_bitfit") {
        recipe.adapters = {layerwise_spec(AdapterTarget::both)};
        recipe.plan = make_plan(with_head(kBiasPatterns), "layerwise adapters plus every additive bias");
    } else if (name == "lilt_da_bitfit") {
        recipe.adapters = {deep_spec(AdapterTarget::both)};
        recipe.plan = make_plan(with_head(kBiasPatterns), "deep adapters plus every additive bias");
    } else if (name == "lit") {
        recipe.plan = make_plan({"text.*", "head.*"}, "text tower trains, image tower locked");
    } else if (name == "lit_reversed") {
        recipe.plan = make_plan({"image.*", "head.*"}, "image tower trains, text tower locked");
    } else if (name == "lit_plus_lilt_da") {
        recipe.adapters = {deep_spec(AdapterTarget::image)};
        recipe.plan = make_plan(with_head({"text.*", "*ln*.gamma", "*ln*.beta"}),
                                "text tower trains, image side adapted with a deep adapter");
    } else if (name == "lit_plus_lilt_lwa") {
        recipe.adapters = {layerwise_spec(AdapterTarget::image)};
        recipe.plan = make_plan(with_head({"text.*", "*ln*.gamma", "*ln*.beta"}),
                                "text tower trains, image side adapted with layerwise adapters");
    } else if (name == "clip") {
        recipe.plan = make_plan({"*"}, "full model training");
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    return recipe;
}

// --------------------------------------------------------------------------
// Conservation check
// --------------------------------------------------------------------------

nlohmann::json FrozenReport::to_json() const {
    return {
        {"frozen_params", frozen_params},
        {"trainable_params", trainable_params},
        {"max_change_by_group", max_change_by_group},
    };
}

FrozenReport verify_frozen(const Container& before, const Container& after, const FreezePlan& plan) {
    if (before.entries.size() != after.entries.size()) {
        throw ComparisonError("checkpoints hold different parameter counts");
    }
    FrozenReport report;
    for (const auto& [path, entry_before] : before.entries) {
        const auto it = after.entries.find(path);
        if (it == after.entries.end()) {
            throw ComparisonError("parameter '" + path + "' missing from the second checkpoint");
        }
        const StoredTensor& entry_after = it->second;
        if (entry_before.shape != entry_after.shape) {
            throw ComparisonError("parameter '" + path + "' changed shape between checkpoints");
        }
        if (plan_unlocks(plan, path)) {
            report.trainable_params += entry_before.count();
            const std::vector<double> a = entry_before.to_doubles();
            const std::vector<double> b = entry_after.to_doubles();
            double max_change = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                max_change = std::max(max_change, std::abs(b[i] - a[i]));
            }
            auto& slot = report.max_change_by_group[param_group(path)];
            slot = std::max(slot, max_change);
        } else {
            report.frozen_params += entry_before.count();
            if (entry_before.dtype != entry_after.dtype || entry_before.raw != entry_after.raw) {
                throw ConservationError("frozen parameter changed: " + path);
            }
        }
    }
    return report;
}

}  // namespace alignlab
