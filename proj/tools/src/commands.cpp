#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <cstdio>
#include <mutex>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "app.hpp"
#include "table.hpp"
#include "voxpeft/errors.hpp"
#include "voxpeft/gradcheck.hpp"
#include "voxpeft/io.hpp"
#include "voxpeft/parallel.hpp"

namespace voxpeft::cli {

namespace fs = std::filesystem;

namespace {

struct Split {
    Dataset train;
    Dataset val;
};

Split source_split(const ExperimentConfig& c) {
    ScannerProfile p = c.source_profile();
    std::size_t crop = c.arch.volume_size;
    return {make_dataset(p, c.data.pretrain_train, crop, c.derived_seed(kSeedPretrainData), c.data.frames),
            make_dataset(p, c.data.pretrain_val, crop, c.derived_seed(kSeedPretrainVal), c.data.frames)};
}

Split target_split(const ExperimentConfig& c) {
    ScannerProfile p = c.target_profile();
    std::size_t crop = c.arch.volume_size;
    return {make_dataset(p, c.data.finetune_train, crop, c.derived_seed(kSeedFinetuneData), c.data.frames),
            make_dataset(p, c.data.finetune_val, crop, c.derived_seed(kSeedFinetuneVal), c.data.frames)};
}

Table history_table(const History& h) {
    Table t({"epoch", "train_loss", "val_psnr", "val_ssim", "val_nrmse", "lr"});
    for (const auto& e : h.epochs) {
        t.add({std::to_string(e.epoch), fmt(e.train_loss, 6), fmt(e.val_psnr, 4), fmt(e.val_ssim, 5),
               fmt(e.val_nrmse, 5), fmt(e.lr, 8)});
    }
    return t;
}

void write_history(const fs::path& dir, const History& h) {
    atomic_write(dir / "history.csv", h.to_csv());
    atomic_write(dir / "history.txt", history_table(h).text());
}

std::string percent(double fraction) { return fmt(100.0 * fraction, 4); }

void write_params(const fs::path& dir, const ParamReport& r) {
    Table t({"module", "total", "trainable", "pct_param"});
    for (const auto& [module, c] : r.per_module) {
        double f = c.total == 0 ? 0.0 : static_cast<double>(c.trainable) / static_cast<double>(c.total);
        t.add({module, std::to_string(c.total), std::to_string(c.trainable), percent(f)});
    }
    t.add({"TOTAL", std::to_string(r.total), std::to_string(r.trainable), percent(r.fraction)});
    t.write(dir / "params");
}

void save_best(const fs::path& path, const TrainResult& r, const std::optional<MixPlan>& plan, const Hyperparams& hp) {
    Checkpoint ck{r.best.clone(), plan, hp, r.optimizer, r.history.best().epoch, "", r.history, {}};
    save_checkpoint(path, ck);
}

RunOptions logging_options(const Context& ctx, const std::string& tag, std::size_t epochs, const fs::path& ckpt) {
    RunOptions ro;
    ro.checkpoint_path = ckpt;
    std::ostream* log = ctx.log;
    ro.on_epoch = [log, tag, epochs](const EpochRecord& r) {
        if (!log) return;
        char buf[256];
        std::snprintf(buf, sizeof buf, "[%s] epoch %zu/%zu loss %.6f val_psnr %.4f ssim %.5f nrmse %.5f lr %.3g\n",
                      tag.c_str(), r.epoch, epochs, r.train_loss, r.val_psnr, r.val_ssim, r.val_nrmse, r.lr);
        *log << buf << std::flush;
    };
    return ro;
}

std::size_t hardware_threads() { return std::max<std::size_t>(1, std::thread::hardware_concurrency()); }

Model load_base(const Context& ctx, const fs::path& from) {
    if (from.empty() || !fs::exists(from)) throw ConfigError("checkpoint not found: " + from.string());
    Checkpoint ck = load_checkpoint(from, ctx.config.arch);
    if (ck.plan) {
        throw ConfigError(from.string() + " was already fine-tuned with '" + ck.plan->label() +
                          "'; start from a pretrained checkpoint");
    }
    return std::move(ck.model);
}

fs::path default_from(const Context& ctx, const fs::path& from) {
    return from.empty() ? ctx.out_dir / "pretrain" / "best.ptit" : from;
}

} // namespace

void write_pairs(const fs::path& dir, const std::vector<VolumeSample>& samples, const ScannerProfile& profile) {
    VolumeMeta meta{profile.spacing, profile.id};
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "val_%03zu", i);
        save_volume(dir / (std::string(stem) + "_short.vol"), samples[i].short_scan, meta);
        save_volume(dir / (std::string(stem) + "_long.vol"), samples[i].long_scan, meta);
    }
}

std::vector<VolumeSample> read_pairs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("data directory not found: " + dir.string());
    std::vector<fs::path> shorts;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::string name = e.path().filename().string();
        if (name.ends_with("_short.vol")) shorts.push_back(e.path());
    }
    std::sort(shorts.begin(), shorts.end());
    if (shorts.empty()) throw ConfigError("no <name>_short.vol / <name>_long.vol pairs in " + dir.string());
    std::vector<VolumeSample> out;
    for (const auto& s : shorts) {
        std::string name = s.filename().string();
        fs::path l = s.parent_path() / (name.substr(0, name.size() - 10) + "_long.vol");
        if (!fs::exists(l)) throw FormatError(s.string() + " has no matching long-scan file " + l.string());
        VolumeSample v;
        LoadedVolume a = load_volume(s);
        v.short_scan = a.volume;
        v.long_scan = load_volume(l).volume;
        v.scanner_id = a.meta.scanner_id;
        if (v.short_scan.shape() != v.long_scan.shape()) {
            throw FormatError(s.string() + ": short and long scans differ in shape");
        }
        out.push_back(std::move(v));
    }
    return out;
}

int cmd_pretrain(const Context& ctx, bool resume_run) {
    const ExperimentConfig& c = ctx.config;
    c.validate();
    fs::path dir = ctx.out_dir / "pretrain";
    fs::path ckpt = dir / "checkpoint.ptit";
    Split data = source_split(c);
    write_pairs(ctx.out_dir / "data" / "source", data.val, c.source_profile());

    Hyperparams hp = c.pretrain_hparams();
    TrainResult r = [&] {
        if (resume_run) {
            if (!fs::exists(ckpt)) throw ConfigError("nothing to resume: " + ckpt.string() + " does not exist");
            Checkpoint ck = load_checkpoint(ckpt, c.arch);
            hp = ck.hp;
            return resume(std::move(ck), data.train, data.val, logging_options(ctx, "pretrain", hp.epochs, ckpt));
        }
        return pretrain(Model::build(c.arch, c.derived_seed(kSeedInit)), data.train, data.val, hp,
                        logging_options(ctx, "pretrain", hp.epochs, ckpt));
    }();
    write_history(dir, r.history);
    save_best(dir / "best.ptit", r, std::nullopt, hp);
    if (ctx.log) {
        const auto& b = r.history.best();
        *ctx.log << "best epoch " << b.epoch << " val_psnr " << fmt(b.val_psnr) << "; wrote " << dir.string() << "\n";
    }
    return kExitOk;
}

int cmd_finetune(const Context& ctx, const fs::path& from, const std::optional<std::string>& requested_plan,
                 bool resume_run) {
    const ExperimentConfig& c = ctx.config;
    c.validate();
    MixPlan plan = c.resolve_plan(requested_plan.value_or(c.plan));
    fs::path dir = ctx.out_dir / "finetune" / voxpeft::plan_name(plan);
    fs::path ckpt = dir / "checkpoint.ptit";
    Split data = target_split(c);
    write_pairs(ctx.out_dir / "data" / "target", data.val, c.target_profile());

    Hyperparams hp = c.finetune_hparams(plan);
    TrainResult r = [&] {
        if (resume_run) {
            if (!fs::exists(ckpt)) throw ConfigError("nothing to resume: " + ckpt.string() + " does not exist");
            Checkpoint ck = load_checkpoint(ckpt, c.arch);
            hp = ck.hp;
            return resume(std::move(ck), data.train, data.val, logging_options(ctx, "finetune", hp.epochs, ckpt));
        }
        Model base = load_base(ctx, default_from(ctx, from));
        return peft_finetune(std::move(base), plan, data.train, data.val, hp,
                             logging_options(ctx, "finetune", hp.epochs, ckpt));
    }();
    ParamReport report = count_params(r.best);
    write_history(dir, r.history);
    write_params(dir, report);
    save_best(dir / "best.ptit", r, plan, hp);
    if (ctx.log) {
        const auto& b = r.history.best();
        *ctx.log << plan.label() << ": trainable " << report.trainable << "/" << report.total << " ("
                 << percent(report.fraction) << "%), best epoch " << b.epoch << " val_psnr " << fmt(b.val_psnr)
                 << "; wrote " << dir.string() << "\n";
    }
    return kExitOk;
}

int cmd_eval(const Context& ctx, const fs::path& model_path, const fs::path& data_dir) {
    if (!fs::exists(model_path)) throw ConfigError("checkpoint not found: " + model_path.string());
    Checkpoint ck = load_checkpoint(model_path);
    Dataset data = read_pairs(data_dir);
    MetricReport m = evaluate(ck.model, data);

    nlohmann::json j;
    if (std::isinf(m.psnr)) j["psnr"] = "inf";
    else j["psnr"] = m.psnr;
    j["ssim"] = m.ssim;
    j["nrmse"] = m.nrmse;
    j["n_samples"] = m.n_samples;
    fs::path dir = ctx.out_dir / "eval";
    atomic_write(dir / "metrics.json", j.dump(2) + "\n");
    Table t({"psnr", "ssim", "nrmse", "n_samples"});
    t.add({fmt(m.psnr), fmt(m.ssim, 6), fmt(m.nrmse, 6), std::to_string(m.n_samples)});
    t.write(dir / "metrics");
    if (ctx.log) *ctx.log << j.dump() << "\n" << t.text();
    return kExitOk;
}

namespace {

struct ArmResult {
    std::string name;
    std::string label;
    std::size_t trainable = 0;
    std::size_t total = 0;
    double fraction = 0.0;
    MetricReport best;
    std::size_t best_epoch = 0;
    std::string error;
};

} // namespace

int cmd_sweep(const Context& ctx, const fs::path& from) {
    const ExperimentConfig& c = ctx.config;
    c.validate();
    Model base = load_base(ctx, default_from(ctx, from));
    Split data = target_split(c);
    write_pairs(ctx.out_dir / "data" / "target", data.val, c.target_profile());

    std::vector<MixPlan> plans;
    if (c.sweep_baselines) {
        plans.push_back(MixPlan::no_ft());
        plans.push_back(MixPlan::full_ft());
    }
    for (MixPlan p : enumerate_combinations(c.arch.variant)) {
        c.peft.apply(p);
        plans.push_back(p);
    }

    std::size_t workers = c.sweep_workers ? c.sweep_workers : (ctx.threads ? ctx.threads : hardware_threads());
    workers = std::min(workers, plans.size());
    std::size_t kernel_threads = num_threads();
    if (workers > 1) set_num_threads(1);

    fs::path root = ctx.out_dir / "sweep";
    std::vector<ArmResult> results(plans.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto say = [&](const std::string& line) {
        if (!ctx.log) return;
        std::lock_guard lock(log_mutex);
        *ctx.log << line << std::flush;
    };
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= plans.size()) return;
            const MixPlan& plan = plans[i];
            ArmResult& a = results[i];
            a.name = plan_name(plan);
            a.label = plan.label();
            fs::path dir = root / a.name;
            try {
                Hyperparams hp = c.finetune_hparams(plan);
                RunOptions ro;
                ro.checkpoint_path = dir / "checkpoint.ptit";
                TrainResult r = peft_finetune(base.clone(), plan, data.train, data.val, hp, ro);
                ParamReport rep = count_params(r.best);
                write_history(dir, r.history);
                write_params(dir, rep);
                save_best(dir / "best.ptit", r, plan, hp);
                const EpochRecord& b = r.history.best();
                a.trainable = rep.trainable;
                a.total = rep.total;
                a.fraction = rep.fraction;
                a.best = {b.val_psnr, b.val_ssim, b.val_nrmse, data.val.size()};
                a.best_epoch = b.epoch;
                say("[sweep] " + a.label + ": val_psnr " + fmt(b.val_psnr) + "\n");
            } catch (const std::exception& e) {
                a.error = e.what();
                try {
                    atomic_write(dir / "error.txt", a.error + "\n");
                } catch (const std::exception&) {
                }
                say("[sweep] " + a.label + ": FAILED: " + a.error + "\n");
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    set_num_threads(kernel_threads);

    std::vector<std::size_t> order(results.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        const ArmResult& a = results[x];
        const ArmResult& b = results[y];
        if (a.error.empty() != b.error.empty()) return a.error.empty();
        return a.error.empty() && a.best.psnr > b.best.psnr;
    });

    Table t({"rank", "plan", "method", "trainable", "pct_param", "psnr", "ssim", "nrmse", "best_epoch", "status"});
    std::size_t failed = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const ArmResult& a = results[order[k]];
        if (!a.error.empty()) {
            ++failed;
            t.add({std::to_string(k + 1), a.name, a.label, "", "", "", "", "", "", "failed"});
            continue;
        }
        t.add({std::to_string(k + 1), a.name, a.label, std::to_string(a.trainable), percent(a.fraction),
               fmt(a.best.psnr), fmt(a.best.ssim, 5), fmt(a.best.nrmse, 5), std::to_string(a.best_epoch), "ok"});
    }
    t.write(root / "ranking");
    if (ctx.log) *ctx.log << t.text();
    if (failed) {
        if (ctx.log) *ctx.log << failed << " of " << results.size() << " arms failed\n";
        return kExitPartialSweep;
    }
    return kExitOk;
}

int cmd_gradcheck(const Context& ctx, bool with_faulty_fixture, bool primitives_only) {
    std::vector<GradcheckResult> all = primitive_gradchecks(ctx.config.seed + 1);
    if (!primitives_only) {
        auto m = model_gradchecks(ctx.config.seed + 1);
        all.insert(all.end(), m.begin(), m.end());
    }
    if (with_faulty_fixture) all.push_back(sign_bug_fixture());
    Table t({"check", "max_rel_error", "entries", "status"});
    std::size_t failed = 0;
    for (const auto& g : all) {
        char err[32];
        std::snprintf(err, sizeof err, "%.3e", g.max_rel_error);
        t.add({g.name, err, std::to_string(g.checked), g.passed ? "pass" : "FAIL"});
        if (!g.passed) ++failed;
    }
    t.write(ctx.out_dir / "gradcheck" / "gradcheck");
    if (ctx.log) {
        *ctx.log << t.text() << (all.size() - failed) << "/" << all.size() << " checks passed\n";
    }
    return failed ? kExitNumeric : kExitOk;
}

int cmd_report(const Context& ctx, const std::vector<std::string>& names) {
    const ExperimentConfig& c = ctx.config;
    c.arch.validate();
    std::vector<MixPlan> plans;
    if (names.empty()) {
        for (const char* n : {"no-ft", "full-ft", "layernorm", "bitfit", "lora", "adapters", "ssf", "vpt"}) {
            plans.push_back(c.resolve_plan(n));
        }
        for (MixPlan p : enumerate_combinations(c.arch.variant)) {
            c.peft.apply(p);
            plans.push_back(p);
        }
    } else {
        for (const auto& n : names) plans.push_back(c.resolve_plan(n));
    }
    Table summary({"plan", "method", "total", "trainable", "pct_param"});
    Table modules({"plan", "module", "total", "trainable"});
    for (const auto& p : plans) {
        ParamReport r = dry_run_count(c.arch, p);
        std::string name = plan_name(p);
        summary.add({name, p.label(), std::to_string(r.total), std::to_string(r.trainable), percent(r.fraction)});
        for (const auto& [m, cnt] : r.per_module) {
            modules.add({name, m, std::to_string(cnt.total), std::to_string(cnt.trainable)});
        }
    }
    fs::path dir = ctx.out_dir / "report";
    summary.write(dir / "params");
    modules.write(dir / "params_modules");
    if (ctx.log) *ctx.log << "variant " << to_string(c.arch.variant) << "\n" << summary.text();
    return kExitOk;
}

} // namespace voxpeft::cli
