#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "config.hpp"

namespace voxpeft::cli {

struct Context {
    ExperimentConfig config;
    std::filesystem::path out_dir = "runs";
    std::size_t threads = 0; // 0 = hardware concurrency
    std::ostream* log = nullptr;
};

int cmd_pretrain(const Context& ctx, bool resume_run);
int cmd_finetune(const Context& ctx, const std::filesystem::path& from, const std::optional<std::string>& requested_plan,
                 bool resume_run);
int cmd_eval(const Context& ctx, const std::filesystem::path& model, const std::filesystem::path& data);
int cmd_sweep(const Context& ctx, const std::filesystem::path& from);
int cmd_gradcheck(const Context& ctx, bool with_faulty_fixture, bool primitives_only);
int cmd_report(const Context& ctx, const std::vector<std::string>& plans);

// Validation pairs are stored as <stem>_short.vol / <stem>_long.vol.
void write_pairs(const std::filesystem::path& dir, const std::vector<VolumeSample>& samples,
                 const ScannerProfile& profile);
std::vector<VolumeSample> read_pairs(const std::filesystem::path& dir);

} // namespace voxpeft::cli
