#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <boost/property_tree/ptree.hpp>

#include "voxpeft/arch.hpp"
#include "voxpeft/mix.hpp"
#include "voxpeft/scanner.hpp"
#include "voxpeft/train.hpp"

namespace voxpeft::cli {

struct DataConfig {
    int source_scanner = 1;
    int target_scanner = 4;
    std::size_t pretrain_train = 30;
    std::size_t pretrain_val = 15;
    std::size_t finetune_train = 10;
    std::size_t finetune_val = 15;
    std::size_t frames = 6;
    std::size_t max_edge = 32;
    std::size_t min_edge = 16;
};

// Hyperparameter overrides; unset fields keep the preset value.
struct HpOverrides {
    std::optional<double> learning_rate;
    std::optional<double> weight_decay;
    std::optional<OptimizerKind> optimizer;
    std::optional<Schedule> schedule;
    std::optional<std::size_t> epochs;
    std::optional<std::size_t> batch_size;
    std::optional<double> warmup_fraction;

    void apply(Hyperparams& hp) const;
};

// Per-method knobs from [peft]; applied to every method of that kind in a plan.
struct PeftOverrides {
    std::optional<std::size_t> lora_rank;
    std::optional<double> lora_alpha;
    std::optional<std::string> lora_targets;
    std::optional<std::size_t> adapter_reduction;
    std::optional<std::size_t> vpt_prompts;
    std::optional<std::size_t> vpt_start_layer;
    std::optional<std::string> vpt_extra_prompts; // "layer:count,..."
    std::optional<std::string> ssf_sites;

    void apply(MixPlan& plan) const;
};

struct ExperimentConfig {
    ArchConfig arch = ArchConfig::desk(Variant::VitCnn);
    DataConfig data;
    bool desk_presets = true;
    HpOverrides pretrain;
    HpOverrides finetune;
    std::string plan = "petite";
    PeftOverrides peft;
    std::size_t sweep_workers = 0; // 0: --threads, else CPU count
    bool sweep_baselines = true;
    std::uint64_t seed = 0;

    void validate() const;

    Hyperparams pretrain_hparams() const;
    Hyperparams finetune_hparams(const MixPlan& plan) const;
    MixPlan resolve_plan(const std::string& name) const;

    // Independent seeds derived from `seed`, one per purpose.
    std::uint64_t derived_seed(std::uint64_t purpose) const;

    ScannerProfile source_profile() const;
    ScannerProfile target_profile() const;
};

enum SeedPurpose : std::uint64_t {
    kSeedInit = 1,
    kSeedPretrainData = 2,
    kSeedPretrainVal = 3,
    kSeedFinetuneData = 4,
    kSeedFinetuneVal = 5,
    kSeedPretrainRun = 6,
    kSeedFinetuneRun = 7,
};

ExperimentConfig config_from_ptree(const boost::property_tree::ptree& tree);
// Empty path yields the defaults.
ExperimentConfig load_config(const std::filesystem::path& path);

} // namespace voxpeft::cli
