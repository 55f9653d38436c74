#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "voxpeft/tensor.hpp"

namespace voxpeft {

using Dims3 = std::array<std::size_t, 3>;

struct ScannerProfile {
    int id = 0;
    Dims3 resolution{};
    std::array<double, 3> spacing{}; // mm
    double noise_scale = 0.0;        // per-frame Gaussian sigma, intensity units
    double psf_sigma = 0.0;          // voxels

    bool operator==(const ScannerProfile&) const = default;
};

// The five acquisition devices at native resolution.
const std::vector<ScannerProfile>& scanner_profiles();
ScannerProfile scanner_profile(int id);

// Desk-scale twin: the grid shrinks until the longest edge is max_edge,
// keeping the aspect ratio, with no edge below min_edge. Spacing grows by the
// same factor so the field of view is unchanged.
ScannerProfile mini_profile(int id, std::size_t max_edge = 32, std::size_t min_edge = 16);

// Volumes are [1, x, y, z].
struct VolumeSample {
    Tensor short_scan; // first frame
    Tensor long_scan;  // mean of all frames
    Tensor clean;      // blurred phantom without noise
    int scanner_id = 0;
    std::uint64_t phantom_seed = 0;
};

// Sum of 3-8 anisotropic Gaussian blobs placed in normalized coordinates,
// rescaled to [0, 1].
Tensor generate_phantom(std::uint64_t seed, const Dims3& dims);
Tensor generate_phantom(std::uint64_t seed, std::size_t size);

// Separable Gaussian with replicated borders; sigma <= 0 copies the input.
Tensor psf_blur(const Tensor& volume, double sigma);

VolumeSample simulate_scan(const Tensor& phantom, const ScannerProfile& profile, std::size_t n_frames,
                           std::uint64_t seed);

// Cuts the same random cube out of every volume in the sample.
VolumeSample crop_normalize(const VolumeSample& sample, std::size_t crop_size, std::uint64_t seed);

std::vector<VolumeSample> make_dataset(const ScannerProfile& profile, std::size_t count, std::size_t crop_size,
                                       std::uint64_t seed, std::size_t n_frames = 6);

struct VolumeMeta {
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    int scanner_id = 0;
    bool operator==(const VolumeMeta&) const = default;
};

struct LoadedVolume {
    Tensor volume;
    VolumeMeta meta;
};

void save_volume(const std::filesystem::path& path, const Tensor& volume, const VolumeMeta& meta);
LoadedVolume load_volume(const std::filesystem::path& path);

} // namespace voxpeft
