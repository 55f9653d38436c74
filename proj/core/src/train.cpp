#include "voxpeft/train.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "voxpeft/errors.hpp"
#include "voxpeft/ops.hpp"
#include "voxpeft/rng.hpp"

namespace voxpeft {

std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "adamw"; }
std::string to_string(Schedule s) { return s == Schedule::CosineAnneal ? "CosineAnneal" : "WarmupCosine"; }

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

} // namespace

OptimizerKind optimizer_from_string(const std::string& s) {
    std::string k = lower(s);
    if (k == "adam") return OptimizerKind::Adam;
    if (k == "adamw") return OptimizerKind::AdamW;
    throw ConfigError("unknown optimizer '" + s + "' (expected adam or adamw)");
}

Schedule schedule_from_string(const std::string& s) {
    std::string k = lower(s);
    if (k == "cosineanneal" || k == "cosine") return Schedule::CosineAnneal;
    if (k == "warmupcosine") return Schedule::WarmupCosine;
    throw ConfigError("unknown schedule '" + s + "' (expected CosineAnneal or WarmupCosine)");
}

void Hyperparams::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be finite and >= 0");
    }
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
        throw ConfigError("weight_decay must be finite and >= 0");
    }
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
        throw ConfigError("warmup_fraction must lie in [0, 1)");
    }
}

Hyperparams hyperparams_preset(Variant v, const MixPlan& plan, bool desk) {
    // Columns: baselines, LayerNorm, BitFit, LoRA, Adapters, VPT, SSF, PETITE.
    std::size_t col = 7;
    if (plan.baseline != Baseline::None) {
        col = 0;
    } else if (!plan.bitfit_all_layers && plan.encoder && (!plan.decoder || plan.decoder->kind == plan.encoder->kind)) {
        switch (plan.encoder->kind) {
        case MethodKind::LayerNormTune: col = 1; break;
        case MethodKind::BitFit: col = 2; break;
        case MethodKind::LoRA: col = 3; break;
        case MethodKind::Adapters: col = 4; break;
        case MethodKind::VPT: col = 5; break;
        case MethodKind::SSF: col = 6; break;
        }
    }
    Hyperparams hp;
    hp.batch_size = 6;
    if (v == Variant::VitVit) {
        static constexpr double lr[] = {1e-3, 1e-3, 1e-3, 1e-3, 1e-2, 1e-3, 1e-2, 1e-3};
        static constexpr double wd[] = {1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 1e-5, 1e-6, 1e-5};
        hp.learning_rate = lr[col];
        hp.weight_decay = wd[col];
        hp.optimizer = col < 4 ? OptimizerKind::Adam : OptimizerKind::AdamW;
        hp.schedule = Schedule::CosineAnneal;
        hp.epochs = 150;
    } else {
        static constexpr double lr[] = {1e-3, 1e-3, 1e-3, 1e-3, 1e-2, 1e-2, 1e-2, 1e-3};
        static constexpr double wd[] = {1e-5, 1e-5, 1e-5, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5};
        hp.learning_rate = lr[col];
        hp.weight_decay = wd[col];
        hp.optimizer = OptimizerKind::AdamW;
        hp.schedule = col < 6 ? Schedule::WarmupCosine : Schedule::CosineAnneal;
        hp.epochs = 200;
    }
    if (desk) hp.epochs /= 10;
    return hp;
}

double lr_at(Schedule schedule, std::size_t step, std::size_t total, double base_lr, double warmup_fraction) {
    if (total == 0) throw ContractError("schedule needs at least one step");
    if (step > total) {
        throw ContractError("step " + std::to_string(step) + " past the end of a " + std::to_string(total) +
                            "-step schedule");
    }
    double s = static_cast<double>(step);
    double t = static_cast<double>(total);
    if (schedule == Schedule::CosineAnneal) {
        return base_lr * (1.0 + std::cos(std::numbers::pi * s / t)) / 2.0;
    }
    double w = warmup_fraction * t;
    if (s < w) return base_lr * s / w;
    return base_lr * (1.0 + std::cos(std::numbers::pi * (s - w) / (t - w))) / 2.0;
}

Optimizer::Optimizer(OptimizerKind kind, double weight_decay) {
    state_.kind = kind;
    state_.weight_decay = weight_decay;
}

void Optimizer::step(Model& model, double lr) {
    ++state_.step;
    double t = static_cast<double>(state_.step);
    double c1 = 1.0 - std::pow(kBeta1, t);
    double c2 = 1.0 - std::pow(kBeta2, t);
    double wd = state_.weight_decay;
    bool decoupled = state_.kind == OptimizerKind::AdamW;
    for (const auto& p : model.parameters()) {
        if (!p.trainable || !p.value.has_grad()) continue;
        Tensor value = p.value;
        auto theta = value.mutable_data();
        auto grad = value.grad();
        auto& mom = state_.moments[p.path];
        if (mom.m.empty()) {
            mom.m.assign(theta.size(), 0.0);
            mom.v.assign(theta.size(), 0.0);
        }
        for (std::size_t i = 0; i < theta.size(); ++i) {
            double g = grad[i];
            if (wd != 0.0) {
                if (decoupled) {
                    theta[i] *= 1.0 - lr * wd;
                } else {
                    g += wd * theta[i];
                }
            }
            mom.m[i] = kBeta1 * mom.m[i] + (1.0 - kBeta1) * g;
            mom.v[i] = kBeta2 * mom.v[i] + (1.0 - kBeta2) * g * g;
            theta[i] -= lr * (mom.m[i] / c1) / (std::sqrt(mom.v[i] / c2) + kEps);
        }
    }
}

void zero_grads(Model& model) {
    for (const auto& p : model.parameters()) {
        if (p.value.defined()) {
            Tensor v = p.value;
            v.zero_grad();
        }
    }
}

std::size_t History::best_index() const {
    if (epochs.empty()) throw ContractError("empty history has no best epoch");
    std::size_t best = 0;
    for (std::size_t i = 1; i < epochs.size(); ++i) {
        if (epochs[i].val_psnr > epochs[best].val_psnr) best = i;
    }
    return best;
}

std::string History::to_csv() const {
    std::string out = "epoch,train_loss,val_psnr,val_ssim,val_nrmse,lr\n";
    char buf[256];
    for (const auto& e : epochs) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss, e.val_psnr,
                      e.val_ssim, e.val_nrmse, e.lr);
        out += buf;
    }
    return out;
}

MetricReport evaluate(const Model& model, const Dataset& data) {
    if (data.empty()) throw ContractError("cannot evaluate on an empty dataset");
    NoGradGuard guard;
    std::vector<MetricReport> per;
    per.reserve(data.size());
    for (const auto& s : data) per.push_back(measure(forward(model, s.short_scan), s.long_scan));
    return mean_report(per);
}

namespace {

std::map<std::string, std::vector<double>> snapshot(const Model& model) {
    std::map<std::string, std::vector<double>> out;
    for (const auto& p : model.parameters()) out[p.path].assign(p.value.data().begin(), p.value.data().end());
    return out;
}

Model with_values(const Model& model, const std::map<std::string, std::vector<double>>& values) {
    Model copy = model.clone();
    for (const auto& [path, v] : values) {
        if (!copy.has(path)) continue;
        auto dst = copy.mutable_value(path).mutable_data();
        std::copy(v.begin(), v.end(), dst.begin());
    }
    return copy;
}

double mean_loss(const Model& model, const Dataset& data) {
    NoGradGuard guard;
    double total = 0.0;
    for (const auto& s : data) total += mse_loss(forward(model, s.short_scan), s.long_scan).item();
    return total / static_cast<double>(data.size());
}

void check_finite(const Model& model, std::size_t global_step) {
    for (const auto& p : model.parameters()) {
        if (!p.trainable) continue;
        for (double x : p.value.data()) {
            if (!std::isfinite(x)) {
                throw NumericError("parameter '" + p.path + "' became non-finite at optimizer step " +
                                   std::to_string(global_step));
            }
        }
    }
}

TrainResult fit(Checkpoint st, const Dataset& train, const Dataset& val, const RunOptions& opts) {
    const Hyperparams& hp = st.hp;
    hp.validate();
    if (train.empty()) throw ContractError("training set is empty");
    if (val.empty()) throw ContractError("validation set is empty");
    Model& model = st.model;
    Optimizer opt(st.optimizer);
    Rng rng;
    rng.set_state(st.rng_state);

    std::size_t n = train.size();
    std::size_t per_epoch = (n + hp.batch_size - 1) / hp.batch_size;
    std::size_t total = per_epoch * hp.epochs;
    std::vector<std::size_t> order(n);

    for (std::size_t epoch = st.epoch + 1; epoch <= hp.epochs; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        shuffle(order, rng);
        double loss_sum = 0.0;
        double first_lr = 0.0;
        for (std::size_t s = 0; s < per_epoch; ++s) {
            std::size_t global = (epoch - 1) * per_epoch + s;
            double lr = lr_at(hp.schedule, global, total, hp.learning_rate, hp.warmup_fraction);
            if (s == 0) first_lr = lr;
            zero_grads(model);
            std::size_t begin = s * hp.batch_size;
            std::size_t end = std::min(n, begin + hp.batch_size);
            double inv = 1.0 / static_cast<double>(end - begin);
            for (std::size_t b = begin; b < end; ++b) {
                const auto& sample = train[order[b]];
                Tensor loss = mse_loss(forward(model, sample.short_scan), sample.long_scan);
                double value = loss.item();
                if (!std::isfinite(value)) {
                    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", optimizer step " +
                                       std::to_string(global + 1) + " (sample " + std::to_string(order[b]) + ")");
                }
                loss_sum += value;
                if (loss.requires_grad()) scale(loss, inv).backward();
            }
            opt.step(model, lr);
            check_finite(model, global + 1);
        }
        zero_grads(model);

        MetricReport r = evaluate(model, val);
        EpochRecord rec{epoch, loss_sum / static_cast<double>(n), r.psnr, r.ssim, r.nrmse, first_lr};
        st.history.epochs.push_back(rec);
        if (st.history.best_index() == st.history.epochs.size() - 1) st.best_values = snapshot(model);
        st.epoch = epoch;
        st.rng_state = rng.state();
        st.optimizer = opt.state();
        if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, st);
        if (opts.on_epoch) opts.on_epoch(rec);
        if (opts.stop_after_epoch != 0 && epoch >= opts.stop_after_epoch) break;
    }
    Model best = st.best_values.empty() ? model.clone() : with_values(model, st.best_values);
    return TrainResult{std::move(best), std::move(model), std::move(st.history), std::move(st.optimizer)};
}

Checkpoint fresh(Model model, std::optional<MixPlan> plan, const Hyperparams& hp) {
    hp.validate();
    Rng rng(hp.seed);
    return Checkpoint{std::move(model), std::move(plan), hp, Optimizer(hp.optimizer, hp.weight_decay).state(), 0,
                      rng.state(), {}, {}};
}

} // namespace

TrainResult pretrain(Model model, const Dataset& train, const Dataset& val, const Hyperparams& hp,
                     const RunOptions& opts) {
    for (const auto& p : model.parameters()) {
        if (!p.trainable) throw ContractError("pretraining expects every parameter trainable; '" + p.path + "' is frozen");
    }
    return fit(fresh(std::move(model), std::nullopt, hp), train, val, opts);
}

TrainResult peft_finetune(Model model, const MixPlan& plan, const Dataset& train, const Dataset& val,
                          const Hyperparams& hp, const RunOptions& opts) {
    hp.validate();
    compose(plan, model);
    if (plan.baseline == Baseline::NoFT) {
        if (val.empty()) throw ContractError("validation set is empty");
        MetricReport r = evaluate(model, val);
        History h;
        h.epochs.push_back({0, train.empty() ? 0.0 : mean_loss(model, train), r.psnr, r.ssim, r.nrmse, 0.0});
        if (opts.on_epoch) opts.on_epoch(h.epochs.back());
        Model best = model.clone();
        Checkpoint st = fresh(std::move(model), plan, hp);
        st.history = h;
        if (!opts.checkpoint_path.empty()) save_checkpoint(opts.checkpoint_path, st);
        return TrainResult{std::move(best), std::move(st.model), std::move(h), st.optimizer};
    }
    return fit(fresh(std::move(model), plan, hp), train, val, opts);
}

TrainResult resume(Checkpoint ckpt, const Dataset& train, const Dataset& val, const RunOptions& opts) {
    return fit(std::move(ckpt), train, val, opts);
}

} // namespace voxpeft
