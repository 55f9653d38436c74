#pragma once

#include <cstddef>
#include <limits>
#include <vector>

#include "voxpeft/tensor.hpp"

namespace voxpeft {

// PSNR of identical volumes.
inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

struct MetricReport {
    double psnr = 0.0;
    double ssim = 0.0;
    double nrmse = 0.0;
    std::size_t n_samples = 0;
};

// Volumes are compared over their last three axes; leading axes must be 1.
double psnr(const Tensor& pred, const Tensor& gt, double max_val = 1.0);

struct SsimOptions {
    std::size_t window = 7;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;
};

// Mean local SSIM over every valid box window (stride 1, no padding), with
// population statistics inside each window.
double ssim3d(const Tensor& pred, const Tensor& gt, const SsimOptions& opts = {});

// RMSE / (max(gt) - min(gt)). Not symmetric.
double nrmse(const Tensor& pred, const Tensor& gt);

MetricReport measure(const Tensor& pred, const Tensor& gt);
// Per-metric mean over samples. An infinite PSNR sample makes the mean infinite.
MetricReport mean_report(const std::vector<MetricReport>& samples);

} // namespace voxpeft
