#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "alignlab/checkpoint.hpp"
#include "alignlab/encoder.hpp"

namespace alignlab {

// Declarative unlocking: a parameter trains iff its path matches one of the
// patterns, or it belongs to an inserted adapter (adapters always train).
// The pattern language is a single wildcard '*' matching any run of
// characters, dots included; anything richer invites irreproducible plans.
struct FreezePlan {
    std::vector<std::string> unlocked_patterns;
    std::string description;

    nlohmann::json to_json() const;
};

bool glob_match(const std::string& pattern, const std::string& path);
bool plan_unlocks(const FreezePlan& plan, const std::string& path);

// tower / ln / bias / projection / adapter / temperature
std::string param_group(const std::string& path);

struct GroupCount {
    std::int64_t total = 0;
    std::int64_t trainable = 0;
};

struct ParamAccounting {
    std::int64_t total_params = 0;
    std::int64_t trainable_params = 0;
    // Inserted adapters count in the denominator.
    double percent_trained = 0.0;
    // Alternative convention: denominator without adapter parameters.
    double percent_trained_host_denominator = 0.0;
    std::map<std::string, GroupCount> groups;

    nlohmann::json to_json() const;
};

// Counts from the parameter schema alone; nothing is allocated. Throws
// PlanError when a pattern matches no path (empty plans are the all-frozen
// plan and are exempt).
ParamAccounting schema_count(const SizePreset& preset, const AdapterState& adapters, const FreezePlan& plan);

// Accounting for an instantiated model, from the actual requires_grad flags.
ParamAccounting model_accounting(const DualEncoder& model);

struct ApplyReport {
    std::vector<std::string> unmatched_patterns;  // diagnostics, not an error
    std::int64_t trainable_params = 0;
};

// Sets requires_grad on exactly the unlocked set. Idempotent.
ApplyReport apply_plan(DualEncoder& model, const FreezePlan& plan);

// --------------------------------------------------------------------------
// Presets (ablation rows a-p)
// --------------------------------------------------------------------------

struct PresetRecipe {
    std::string name;
    std::vector<AdapterSpec> adapters;
    FreezePlan plan;
};

PresetRecipe preset_recipe(const std::string& name);
const std::vector<std::string>& preset_names();

// --------------------------------------------------------------------------
// Conservation check
// --------------------------------------------------------------------------

struct FrozenReport {
    std::int64_t frozen_params = 0;
    std::int64_t trainable_params = 0;
    // max |after - before| over the trainable parameters of each group
    std::map<std::string, double> max_change_by_group;

    nlohmann::json to_json() const;
};

// Asserts bit-identity of every frozen parameter between two checkpoints and
// reports how far each trainable group moved. Throws ConservationError naming
// the first frozen path that changed.
FrozenReport verify_frozen(const Container& before, const Container& after, const FreezePlan& plan);

}  // namespace alignlab
