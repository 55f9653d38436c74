#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "app.hpp"
#include "voxpeft/mix.hpp"
#include "voxpeft/train.hpp"

using namespace voxpeft;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(std::vector<std::string> args) {
    std::ostringstream out, err;
    int code = cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / "voxpeft_cli_tests" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

// Minimal RFC 4180 reader for the tables the CLI writes.
std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> row;
        std::string cell;
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            char c = line[i];
            if (quoted) {
                if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cell += '"', ++i;
                else if (c == '"') quoted = false;
                else cell += c;
            } else if (c == '"') {
                quoted = true;
            } else if (c == ',') {
                row.push_back(cell);
                cell.clear();
            } else {
                cell += c;
            }
        }
        row.push_back(cell);
        rows.push_back(row);
    }
    return rows;
}

// Tiny architecture and data so whole pipelines finish in seconds.
fs::path write_config(const fs::path& dir, const std::string& variant, const std::string& extra = "") {
    std::string arch = variant == "vitvit"
                           ? "decoder_layers = 2\n"
                           : "skip_layers = 1,2\ndecoder_channels = 8,4\n";
    std::ofstream f(dir / "exp.ini");
    f << "[arch]\nvariant = " << variant << "\nembed_dim = 16\nnum_heads = 2\nencoder_layers = 2\n"
      << "peft_encoder_layers = 0\npeft_decoder_layers = 0\n" << arch
      << "[scanner]\npretrain_train = 2\npretrain_val = 1\nfinetune_train = 1\nfinetune_val = 1\n"
      << "[pretrain]\nepochs = 2\nbatch_size = 2\n"
      << "[finetune]\nepochs = 1\nbatch_size = 1\n"
      << "[sweep]\nworkers = 1\n"
      << "[run]\nseed = 3\n"
      << extra;
    return dir / "exp.ini";
}

} // namespace

TEST(Cli, HelpAndUsageErrors) {
    EXPECT_EQ(invoke({"--help"}).code, 0);
    EXPECT_EQ(invoke({}).code, 2);
    EXPECT_EQ(invoke({"frobnicate"}).code, 2);
    EXPECT_EQ(invoke({"eval"}).code, 2);
    EXPECT_EQ(invoke({"--config", "/nonexistent/x.ini", "report"}).code, 2);
}

TEST(Cli, ConfigRejectsUnknownKeysAndBadValues) {
    auto d = fresh_dir("badcfg");
    auto cfg = write_config(d, "vitcnn", "[peft]\nbogus = 1\n");
    auto r = invoke({"--config", cfg.string(), "--out", (d / "o").string(), "report"});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("bogus"), std::string::npos) << r.err;

    std::ofstream(d / "same.ini") << "[scanner]\nsource = 2\ntarget = 2\n";
    EXPECT_EQ(invoke({"--config", (d / "same.ini").string(), "--out", (d / "o").string(), "pretrain"}).code, 2);
}

TEST(Cli, ReportWritesEveryPlan) {
    auto d = fresh_dir("report");
    auto r = invoke({"--out", d.string(), "report"});
    ASSERT_EQ(r.code, 0) << r.err;
    auto rows = read_csv(d / "report" / "params.csv");
    ASSERT_FALSE(rows.empty());
    EXPECT_EQ(rows[0], (std::vector<std::string>{"plan", "method", "total", "trainable", "pct_param"}));
    // Eight single methods and baselines plus nine combinations.
    EXPECT_EQ(rows.size(), 1u + 8u + 9u);
    EXPECT_TRUE(fs::exists(d / "report" / "params.txt"));
    EXPECT_TRUE(fs::exists(d / "report" / "params_modules.csv"));

    auto sel = invoke({"--out", (d / "sel").string(), "report", "--plan", "lora", "--plan", "no-ft"});
    ASSERT_EQ(sel.code, 0) << sel.err;
    EXPECT_EQ(read_csv(d / "sel" / "report" / "params.csv").size(), 3u);
    EXPECT_EQ(invoke({"--out", d.string(), "report", "--plan", "nonsense"}).code, 2);
}

TEST(Cli, GradcheckExitCodes) {
    auto d = fresh_dir("gc");
    auto ok = invoke({"--out", d.string(), "gradcheck", "--primitives-only"});
    EXPECT_EQ(ok.code, 0) << ok.out << ok.err;
    auto rows = read_csv(d / "gradcheck" / "gradcheck.csv");
    ASSERT_GT(rows.size(), 10u);
    for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(rows[i].back(), "pass") << rows[i][0];

    auto bad = invoke({"--out", d.string(), "gradcheck", "--primitives-only", "--with-faulty-fixture"});
    EXPECT_EQ(bad.code, 3);
}

TEST(Cli, PretrainFinetuneEvalPipeline) {
    auto d = fresh_dir("pipe");
    auto cfg = write_config(d, "vitcnn").string();
    auto out = (d / "deep" / "nested" / "out").string();

    auto pre = invoke({"--config", cfg, "--out", out, "pretrain"});
    ASSERT_EQ(pre.code, 0) << pre.err;
    EXPECT_TRUE(fs::exists(fs::path(out) / "pretrain" / "best.ptit"));
    EXPECT_EQ(read_csv(fs::path(out) / "pretrain" / "history.csv").size(), 3u);

    // Same config and seed into a second directory reproduces the history bytes.
    auto out2 = (d / "again").string();
    ASSERT_EQ(invoke({"--config", cfg, "--out", out2, "pretrain"}).code, 0);
    EXPECT_EQ(slurp(fs::path(out) / "pretrain" / "history.csv"), slurp(fs::path(out2) / "pretrain" / "history.csv"));
    auto out3 = (d / "seeded").string();
    ASSERT_EQ(invoke({"--config", cfg, "--seed", "99", "--out", out3, "pretrain"}).code, 0);
    EXPECT_NE(slurp(fs::path(out) / "pretrain" / "history.csv"), slurp(fs::path(out3) / "pretrain" / "history.csv"));

    auto ft = invoke({"--config", cfg, "--out", out, "finetune", "--plan", "petite"});
    ASSERT_EQ(ft.code, 0) << ft.err;
    auto fdir = fs::path(out) / "finetune" / plan_name(MixPlan::petite(Variant::VitCnn));
    ASSERT_TRUE(fs::exists(fdir / "best.ptit")) << fdir;
    auto params = read_csv(fdir / "params.csv");
    auto ck = load_checkpoint(fdir / "best.ptit");
    auto recount = count_params(ck.model);
    ASSERT_EQ(params.back()[0], "TOTAL");
    EXPECT_EQ(std::stoull(params.back()[1]), recount.total);
    EXPECT_EQ(std::stoull(params.back()[2]), recount.trainable);
    EXPECT_EQ(params.size(), recount.per_module.size() + 2);

    auto noft = invoke({"--config", cfg, "--out", out, "finetune", "--plan", "no-ft"});
    ASSERT_EQ(noft.code, 0) << noft.err;
    auto np = read_csv(fs::path(out) / "finetune" / "no-ft" / "params.csv");
    EXPECT_EQ(np.back()[2], "0");

    auto ev = invoke({"--config", cfg, "--out", out, "eval", "--model", (fdir / "best.ptit").string(), "--data",
                   (fs::path(out) / "data" / "target").string()});
    ASSERT_EQ(ev.code, 0) << ev.err;
    auto j = nlohmann::json::parse(slurp(fs::path(out) / "eval" / "metrics.json"));
    EXPECT_EQ(j["n_samples"], 1);
    EXPECT_NEAR(j["psnr"].get<double>(), ck.history.best().val_psnr, 1e-9);

    // Fine-tuned checkpoints are rejected as a base.
    EXPECT_EQ(invoke({"--config", cfg, "--out", out, "finetune", "--from", (fdir / "best.ptit").string()}).code, 2);
}

TEST(Cli, EvalAgainstOwnPredictionsAndEmptyDirs) {
    auto d = fresh_dir("eval");
    auto cfg = write_config(d, "vitvit").string();
    ASSERT_EQ(invoke({"--config", cfg, "--out", d.string(), "pretrain"}).code, 0);
    auto ck = load_checkpoint(d / "pretrain" / "best.ptit");

    fs::create_directories(d / "oracle");
    auto data = make_dataset(mini_profile(1), 2, 16, 5);
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::string stem = "s" + std::to_string(i);
        save_volume(d / "oracle" / (stem + "_short.vol"), data[i].short_scan, {});
        save_volume(d / "oracle" / (stem + "_long.vol"), forward(ck.model, data[i].short_scan).detach(), {});
    }
    auto ev = invoke({"--out", d.string(), "eval", "--model", (d / "pretrain" / "best.ptit").string(), "--data",
                   (d / "oracle").string()});
    ASSERT_EQ(ev.code, 0) << ev.err;
    auto j = nlohmann::json::parse(slurp(d / "eval" / "metrics.json"));
    EXPECT_EQ(j["psnr"], "inf");
    EXPECT_NEAR(j["ssim"].get<double>(), 1.0, 1e-12);
    EXPECT_EQ(j["nrmse"].get<double>(), 0.0);
    EXPECT_EQ(j["n_samples"], 2);

    fs::create_directories(d / "empty");
    EXPECT_EQ(invoke({"--out", d.string(), "eval", "--model", (d / "pretrain" / "best.ptit").string(), "--data",
                   (d / "empty").string()})
                  .code,
              2);
    EXPECT_EQ(invoke({"--out", d.string(), "eval", "--model", (d / "nope.ptit").string(), "--data",
                   (d / "oracle").string()})
                  .code,
              2);
}

TEST(Cli, ArchitectureMismatchIsAConfigError) {
    auto d = fresh_dir("mismatch");
    auto cnn = write_config(d, "vitcnn").string();
    ASSERT_EQ(invoke({"--config", cnn, "--out", d.string(), "pretrain"}).code, 0);
    fs::create_directories(d / "vv");
    auto vv = write_config(d / "vv", "vitvit").string();
    auto r = invoke({"--config", vv, "--out", d.string(), "finetune", "--plan", "lora"});
    EXPECT_EQ(r.code, 2) << r.err;
}

TEST(Cli, DivergenceIsANumericFailure) {
    auto d = fresh_dir("nan");
    auto cfg = write_config(d, "vitcnn", "").string();
    std::string text = slurp(cfg);
    text.replace(text.find("[pretrain]\nepochs = 2"), 20, "[pretrain]\nlearning_rate = 1e300\nepochs = 4");
    std::ofstream(cfg) << text;
    EXPECT_EQ(invoke({"--config", cfg, "--out", d.string(), "pretrain"}).code, 3);
}

TEST(Cli, SweepRanksEveryArm) {
    for (auto [variant, arms] : {std::pair<std::string, std::size_t>{"vitvit", 14}, {"vitcnn", 11}}) {
        auto d = fresh_dir("sweep_" + variant);
        auto cfg = write_config(d, variant).string();
        ASSERT_EQ(invoke({"--config", cfg, "--out", d.string(), "pretrain"}).code, 0);
        auto r = invoke({"--config", cfg, "--out", d.string(), "sweep"});
        ASSERT_EQ(r.code, 0) << r.err;
        auto rows = read_csv(d / "sweep" / "ranking.csv");
        ASSERT_EQ(rows.size(), arms + 1) << variant;
        EXPECT_EQ(rows[0][5], "psnr");
        for (std::size_t i = 2; i < rows.size(); ++i) {
            EXPECT_GE(std::stod(rows[i - 1][5]), std::stod(rows[i][5]));
            EXPECT_EQ(rows[i].back(), "ok");
        }
        std::set<std::string> names;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            names.insert(rows[i][1]);
            EXPECT_TRUE(fs::exists(d / "sweep" / rows[i][1] / "best.ptit")) << rows[i][1];
        }
        EXPECT_EQ(names.size(), arms);
        EXPECT_TRUE(names.count("no-ft") && names.count("full-ft"));
    }
}
