#include "app.hpp"

#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "commands.hpp"
#include "voxpeft/errors.hpp"
#include "voxpeft/parallel.hpp"

namespace voxpeft::cli {

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Parameter-efficient fine-tuning of volumetric reconstruction networks", "voxpeft"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "runs";
    std::size_t threads = 0;
    app.add_option("--config", config_path, "INI experiment config")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, "Master seed (overrides [run] seed)");
    app.add_option("--out", out_dir, "Output directory")->capture_default_str();
    app.add_option("--threads", threads, "Worker threads (0 = all cores)")->capture_default_str();

    bool resume_run = false;
    auto* pre = app.add_subcommand("pretrain", "Train every parameter on source-scanner data");
    pre->add_flag("--resume", resume_run, "Continue from <out>/pretrain/checkpoint.ptit");

    std::string from;
    std::optional<std::string> plan;
    auto* ft = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint on target-scanner data");
    ft->add_option("--from", from, "Pretrained checkpoint (default <out>/pretrain/best.ptit)");
    ft->add_option("--plan", plan, "Plan name, e.g. petite, lora, vpt+lora+bitfit (default [finetune] plan)");
    ft->add_flag("--resume", resume_run, "Continue from the plan's checkpoint.ptit");

    std::string model_path;
    std::string data_dir;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a directory of short/long scan pairs");
    ev->add_option("--model", model_path, "Checkpoint")->required();
    ev->add_option("--data", data_dir, "Directory with <name>_short.vol / <name>_long.vol")->required();

    auto* sw = app.add_subcommand("sweep", "Fine-tune every feasible encoder/decoder combination plus baselines");
    sw->add_option("--from", from, "Pretrained checkpoint (default <out>/pretrain/best.ptit)");

    bool faulty = false;
    bool primitives_only = false;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable primitive");
    gc->add_flag("--with-faulty-fixture", faulty, "Include a deliberately wrong backward (must fail)");
    gc->add_flag("--primitives-only", primitives_only, "Skip the whole-model checks");

    std::vector<std::string> plans;
    auto* rep = app.add_subcommand("report", "Parameter accounting per plan, computed from shapes only");
    rep->add_option("--plan", plans, "Plans to report (default: all)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        std::ostringstream o, x;
        int code = app.exit(e, o, x);
        out << o.str();
        err << x.str();
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        Context ctx;
        ctx.config = load_config(config_path);
        if (seed) ctx.config.seed = *seed;
        ctx.out_dir = out_dir;
        ctx.threads = threads;
        ctx.log = &out;
        set_num_threads(threads ? threads : std::max(1u, std::thread::hardware_concurrency()));

        if (*pre) return cmd_pretrain(ctx, resume_run);
        if (*ft) return cmd_finetune(ctx, from, plan, resume_run);
        if (*ev) return cmd_eval(ctx, model_path, data_dir);
        if (*sw) return cmd_sweep(ctx, from);
        if (*gc) return cmd_gradcheck(ctx, faulty, primitives_only);
        if (*rep) return cmd_report(ctx, plans);
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const FormatError& e) {
        err << "format error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DimensionError& e) {
        err << "dimension error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContractError& e) {
        err << "usage error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitConfig;
}

} // namespace voxpeft::cli
