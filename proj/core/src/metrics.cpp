#include "voxpeft/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "voxpeft/errors.hpp"

namespace voxpeft {

namespace {

using Dims = std::array<std::size_t, 3>;

Dims volume_dims(const Tensor& t) {
    const Shape& s = t.shape();
    if (s.size() < 3) {
        throw DimensionError("expected a volume with at least 3 axes, got " + shape_str(s));
    }
    for (std::size_t i = 0; i + 3 < s.size(); ++i) {
        if (s[i] != 1) throw DimensionError("leading axes of a volume must be 1, got " + shape_str(s));
    }
    std::size_t n = s.size();
    return {s[n - 3], s[n - 2], s[n - 1]};
}

void check_pair(const Tensor& pred, const Tensor& gt) {
    if (volume_dims(pred) != volume_dims(gt) || pred.numel() != gt.numel()) {
        throw DimensionError("metric inputs differ in shape: " + shape_str(pred.shape()) + " vs " +
                             shape_str(gt.shape()));
    }
}

double mse(const Tensor& pred, const Tensor& gt) {
    auto a = pred.data();
    auto b = gt.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

// Sum over every k-long run along one axis; that axis shrinks by k - 1.
std::vector<double> box_axis(const std::vector<double>& in, Dims& dims, std::size_t axis, std::size_t k) {
    Dims out_dims = dims;
    out_dims[axis] = dims[axis] - k + 1;
    std::size_t stride = 1;
    for (std::size_t a = axis + 1; a < 3; ++a) stride *= dims[a];
    std::vector<double> out(out_dims[0] * out_dims[1] * out_dims[2]);
    std::size_t idx = 0;
    for (std::size_t i = 0; i < out_dims[0]; ++i) {
        for (std::size_t j = 0; j < out_dims[1]; ++j) {
            for (std::size_t l = 0; l < out_dims[2]; ++l, ++idx) {
                std::size_t base = (i * dims[1] + j) * dims[2] + l;
                double acc = 0.0;
                for (std::size_t t = 0; t < k; ++t) acc += in[base + t * stride];
                out[idx] = acc;
            }
        }
    }
    dims = out_dims;
    return out;
}

std::vector<double> box_sum(std::vector<double> v, Dims dims, std::size_t k) {
    for (std::size_t axis = 3; axis-- > 0;) v = box_axis(v, dims, axis, k);
    return v;
}

} // namespace

double psnr(const Tensor& pred, const Tensor& gt, double max_val) {
    check_pair(pred, gt);
    double m = mse(pred, gt);
    if (m == 0.0) return kPsnrInfinity;
    return 10.0 * std::log10(max_val * max_val / m);
}

double ssim3d(const Tensor& pred, const Tensor& gt, const SsimOptions& opts) {
    check_pair(pred, gt);
    Dims dims = volume_dims(gt);
    std::size_t k = opts.window;
    if (k == 0 || dims[0] < k || dims[1] < k || dims[2] < k) {
        throw DimensionError("SSIM window " + std::to_string(k) + " does not fit volume " + shape_str(gt.shape()));
    }
    auto x = pred.data();
    auto y = gt.data();
    std::vector<double> xs(x.begin(), x.end());
    std::vector<double> ys(y.begin(), y.end());
    std::vector<double> xx(xs.size()), yy(xs.size()), xy(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xx[i] = xs[i] * xs[i];
        yy[i] = ys[i] * ys[i];
        xy[i] = xs[i] * ys[i];
    }
    auto sx = box_sum(std::move(xs), dims, k);
    auto sy = box_sum(std::move(ys), dims, k);
    auto sxx = box_sum(std::move(xx), dims, k);
    auto syy = box_sum(std::move(yy), dims, k);
    auto sxy = box_sum(std::move(xy), dims, k);

    double n = static_cast<double>(k * k * k);
    double c1 = std::pow(opts.k1 * opts.dynamic_range, 2);
    double c2 = std::pow(opts.k2 * opts.dynamic_range, 2);
    double total = 0.0;
    for (std::size_t i = 0; i < sx.size(); ++i) {
        double mx = sx[i] / n;
        double my = sy[i] / n;
        double vx = sxx[i] / n - mx * mx;
        double vy = syy[i] / n - my * my;
        double cov = sxy[i] / n - mx * my;
        total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(sx.size());
}

double nrmse(const Tensor& pred, const Tensor& gt) {
    check_pair(pred, gt);
    auto [lo, hi] = std::minmax_element(gt.data().begin(), gt.data().end());
    double range = *hi - *lo;
    if (range == 0.0) {
        throw DegenerateRangeError("NRMSE is undefined for a constant ground truth");
    }
    return std::sqrt(mse(pred, gt)) / range;
}

MetricReport measure(const Tensor& pred, const Tensor& gt) {
    MetricReport r;
    r.psnr = psnr(pred, gt);
    r.ssim = ssim3d(pred, gt);
    r.nrmse = nrmse(pred, gt);
    r.n_samples = 1;
    return r;
}

MetricReport mean_report(const std::vector<MetricReport>& samples) {
    if (samples.empty()) throw ContractError("no samples to average");
    MetricReport r;
    for (const auto& s : samples) {
        r.psnr += s.psnr;
        r.ssim += s.ssim;
        r.nrmse += s.nrmse;
        r.n_samples += s.n_samples;
    }
    double n = static_cast<double>(samples.size());
    r.psnr /= n;
    r.ssim /= n;
    r.nrmse /= n;
    return r;
}

} // namespace voxpeft
