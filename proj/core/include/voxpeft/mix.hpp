#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxpeft/model.hpp"
#include "voxpeft/peft.hpp"

namespace voxpeft {

enum class Baseline { None, NoFT, FullFT };

// One fine-tuning configuration: independent encoder/decoder methods plus an
// optional model-wide BitFit.
struct MixPlan {
    std::optional<PeftMethod> encoder;
    std::optional<PeftMethod> decoder;
    bool bitfit_all_layers = false;
    Baseline baseline = Baseline::None;

    static MixPlan no_ft();
    static MixPlan full_ft();
    static MixPlan mix(PeftMethod enc, PeftMethod dec, bool bitfit = true);
    // VPT(enc) + LoRA(dec) for VitVit; LoRA(enc) + SSF(dec) for VitCnn; both with BitFit.
    static MixPlan petite(Variant v);
    // One method on both halves with the per-role presets (VPT: encoder only).
    static MixPlan single(MethodKind kind, Variant v);

    // Throws FeasibilityError for combinations the variant cannot host.
    void validate(Variant v) const;
    std::string label() const;

    bool operator==(const MixPlan&) const = default;
};

// Method hyperparameters used for `kind` on variant `v` in the given role.
PeftMethod method_preset(MethodKind kind, Variant v, Stack role);

// "no-ft", "full-ft", "bitfit", "layernorm", "lora", "adapters", "ssf", "vpt",
// "petite-vitvit", "petite-vitcnn", or "<enc>+<dec>[+bitfit]" for a pair.
MixPlan plan_from_name(const std::string& name, Variant v);
std::string plan_name(const MixPlan& plan);

struct ModuleCount {
    std::size_t total = 0;
    std::size_t trainable = 0;
    bool operator==(const ModuleCount&) const = default;
};

struct ParamReport {
    std::size_t total = 0;
    std::size_t trainable = 0;
    double fraction = 0.0; // trainable / total, injected parameters included in both
    std::map<std::string, ModuleCount> per_module; // keyed by the first two path components

    bool operator==(const ParamReport&) const = default;
};

ParamReport count_params(const Model& model);

// Freezes/unfreezes/injects per the plan and reports the resulting counts.
ParamReport compose(const MixPlan& plan, Model& model);

// Same report as compose on a built model, computed from shapes alone.
ParamReport dry_run_count(const ArchConfig& config, const MixPlan& plan);

// Every feasible encoder/decoder pair with BitFit, in the order of the
// published tables: 12 for VitVit, 9 for VitCnn.
std::vector<MixPlan> enumerate_combinations(Variant v);

} // namespace voxpeft
