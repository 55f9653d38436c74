#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxpeft/metrics.hpp"
#include "voxpeft/mix.hpp"
#include "voxpeft/model.hpp"
#include "voxpeft/scanner.hpp"

namespace voxpeft {

enum class OptimizerKind { Adam, AdamW };
enum class Schedule { CosineAnneal, WarmupCosine };

std::string to_string(OptimizerKind k);
std::string to_string(Schedule s);
OptimizerKind optimizer_from_string(const std::string& s);
Schedule schedule_from_string(const std::string& s);

struct Hyperparams {
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    OptimizerKind optimizer = OptimizerKind::AdamW;
    Schedule schedule = Schedule::CosineAnneal;
    std::size_t epochs = 1;
    std::size_t batch_size = 6;
    std::uint64_t seed = 0;
    double warmup_fraction = 0.1;

    void validate() const;
    bool operator==(const Hyperparams&) const = default;
};

// Published per-method settings; mixed plans use the PETITE column. Desk
// presets run a tenth of the published epochs.
Hyperparams hyperparams_preset(Variant v, const MixPlan& plan, bool desk = true);

// Learning rate for 0-based `step` of `total`. WarmupCosine ramps linearly
// over the first warmup_fraction of the steps, then follows a cosine to 0.
double lr_at(Schedule schedule, std::size_t step, std::size_t total, double base_lr,
             double warmup_fraction = 0.1);

struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    bool operator==(const Moments&) const = default;
};

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::AdamW;
    double weight_decay = 0.0;
    std::size_t step = 0;
    std::map<std::string, Moments> moments; // trainable parameters only
    bool operator==(const OptimizerState&) const = default;
};

// Adam folds weight decay into the gradient; AdamW decays the weights
// directly (decoupled), scaled by the learning rate.
class Optimizer {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    Optimizer(OptimizerKind kind, double weight_decay);
    explicit Optimizer(OptimizerState state) : state_(std::move(state)) {}

    // Updates every trainable parameter from its accumulated gradient. Frozen
    // parameters are never touched.
    void step(Model& model, double lr);
    const OptimizerState& state() const { return state_; }

private:
    OptimizerState state_;
};

void zero_grads(Model& model);

using Dataset = std::vector<VolumeSample>;

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_psnr = 0.0;
    double val_ssim = 0.0;
    double val_nrmse = 0.0;
    double lr = 0.0;
    bool operator==(const EpochRecord&) const = default;
};

struct History {
    std::vector<EpochRecord> epochs;

    // Index into `epochs` with the highest val_psnr; ties go to the earlier epoch.
    std::size_t best_index() const;
    const EpochRecord& best() const { return epochs.at(best_index()); }
    std::string to_csv() const;
    bool operator==(const History&) const = default;
};

// Mean metrics of forward(short_scan) against long_scan. Read-only.
MetricReport evaluate(const Model& model, const Dataset& data);

// Everything needed to continue a run at an epoch boundary.
struct Checkpoint {
    Model model;
    std::optional<MixPlan> plan;
    Hyperparams hp;
    OptimizerState optimizer;
    std::size_t epoch = 0; // completed epochs
    std::string rng_state;
    History history;
    std::map<std::string, std::vector<double>> best_values; // parameters at the best epoch so far
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Loads and rejects checkpoints built for another architecture.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected);

struct RunOptions {
    // Written atomically after every epoch when set.
    std::filesystem::path checkpoint_path;
    // Return after this many completed epochs (0 = run to the end).
    std::size_t stop_after_epoch = 0;
    // Called after each epoch with the new record.
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    Model best; // weights of the best validation epoch
    Model last;
    History history;
    OptimizerState optimizer;
};

// MSE(forward(short), long) training of every parameter.
TrainResult pretrain(Model model, const Dataset& train, const Dataset& val, const Hyperparams& hp,
                     const RunOptions& opts = {});

// compose(plan), then trains only what the plan unfroze. No-FT only evaluates.
TrainResult peft_finetune(Model model, const MixPlan& plan, const Dataset& train, const Dataset& val,
                          const Hyperparams& hp, const RunOptions& opts = {});

// Continues a saved run with its stored plan and hyperparameters.
TrainResult resume(Checkpoint ckpt, const Dataset& train, const Dataset& val, const RunOptions& opts = {});

} // namespace voxpeft
