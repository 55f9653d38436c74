#include "voxpeft/scanner.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "voxpeft/errors.hpp"
#include "voxpeft/io.hpp"
#include "voxpeft/rng.hpp"

namespace voxpeft {

const std::vector<ScannerProfile>& scanner_profiles() {
    static const std::vector<ScannerProfile> table{
        {1, {192, 192, 136}, {1.21875, 1.21875, 1.21875}, 0.08, 0.5},
        {2, {192, 192, 128}, {1.21875, 1.21875, 1.21875}, 0.10, 0.8},
        {3, {224, 224, 81}, {1.01821, 1.01821, 2.02699}, 0.12, 1.0},
        {4, {128, 128, 90}, {2.0, 2.0, 2.0}, 0.15, 1.2},
        {5, {128, 128, 63}, {2.05941, 2.05941, 2.425}, 0.12, 1.5},
    };
    return table;
}

ScannerProfile scanner_profile(int id) {
    for (const auto& p : scanner_profiles()) {
        if (p.id == id) return p;
    }
    throw ConfigError("unknown scanner id " + std::to_string(id) + " (expected 1-5)");
}

ScannerProfile mini_profile(int id, std::size_t max_edge, std::size_t min_edge) {
    ScannerProfile p = scanner_profile(id);
    std::size_t longest = *std::max_element(p.resolution.begin(), p.resolution.end());
    double factor = static_cast<double>(max_edge) / static_cast<double>(longest);
    for (std::size_t a = 0; a < 3; ++a) {
        auto edge = static_cast<std::size_t>(std::lround(static_cast<double>(p.resolution[a]) * factor));
        edge = std::max(edge, min_edge);
        p.spacing[a] *= static_cast<double>(p.resolution[a]) / static_cast<double>(edge);
        p.resolution[a] = edge;
    }
    return p;
}

namespace {

Dims3 dims_of(const Tensor& v) {
    const Shape& s = v.shape();
    if (s.size() != 4 || s[0] != 1) {
        throw DimensionError("expected a [1, x, y, z] volume, got " + shape_str(s));
    }
    return {s[1], s[2], s[3]};
}

std::vector<double> gaussian_kernel(double sigma) {
    auto radius = static_cast<std::size_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (std::size_t i = 0; i < k.size(); ++i) {
        double t = static_cast<double>(i) - static_cast<double>(radius);
        k[i] = std::exp(-t * t / (2.0 * sigma * sigma));
        total += k[i];
    }
    for (double& w : k) w /= total;
    return k;
}

} // namespace

Tensor generate_phantom(std::uint64_t seed, const Dims3& dims) {
    for (std::size_t d : dims) {
        if (d < 8) throw ConfigError("phantom edges must be >= 8 voxels");
    }
    Rng rng(seed);
    struct Blob {
        std::array<double, 3> center, sigma;
        double amplitude;
    };
    std::vector<Blob> blobs(3 + rng.index(6));
    for (auto& b : blobs) {
        for (std::size_t a = 0; a < 3; ++a) {
            b.center[a] = rng.uniform(0.15, 0.85);
            b.sigma[a] = rng.uniform(0.06, 0.22);
        }
        b.amplitude = rng.uniform(0.4, 1.0);
    }
    Tensor out = Tensor::zeros({1, dims[0], dims[1], dims[2]});
    auto v = out.mutable_data();
    std::size_t idx = 0;
    for (std::size_t i = 0; i < dims[0]; ++i) {
        double u0 = (static_cast<double>(i) + 0.5) / static_cast<double>(dims[0]);
        for (std::size_t j = 0; j < dims[1]; ++j) {
            double u1 = (static_cast<double>(j) + 0.5) / static_cast<double>(dims[1]);
            for (std::size_t l = 0; l < dims[2]; ++l, ++idx) {
                double u2 = (static_cast<double>(l) + 0.5) / static_cast<double>(dims[2]);
                double acc = 0.0;
                for (const auto& b : blobs) {
                    double e0 = (u0 - b.center[0]) / b.sigma[0];
                    double e1 = (u1 - b.center[1]) / b.sigma[1];
                    double e2 = (u2 - b.center[2]) / b.sigma[2];
                    acc += b.amplitude * std::exp(-0.5 * (e0 * e0 + e1 * e1 + e2 * e2));
                }
                v[idx] = acc;
            }
        }
    }
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    double low = *lo;
    double range = *hi - *lo;
    for (double& x : v) x = range > 0.0 ? (x - low) / range : 0.0;
    return out;
}

Tensor generate_phantom(std::uint64_t seed, std::size_t size) { return generate_phantom(seed, Dims3{size, size, size}); }

Tensor psf_blur(const Tensor& volume, double sigma) {
    Dims3 dims = dims_of(volume);
    if (sigma <= 0.0) return volume.detach().clone();
    auto k = gaussian_kernel(sigma);
    auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
    std::vector<double> cur(volume.data().begin(), volume.data().end());
    std::vector<double> next(cur.size());
    for (std::size_t axis = 0; axis < 3; ++axis) {
        std::size_t stride = 1;
        for (std::size_t a = axis + 1; a < 3; ++a) stride *= dims[a];
        auto n = static_cast<std::ptrdiff_t>(dims[axis]);
        for (std::size_t idx = 0; idx < cur.size(); ++idx) {
            auto pos = static_cast<std::ptrdiff_t>((idx / stride) % dims[axis]);
            std::size_t base = idx - static_cast<std::size_t>(pos) * stride;
            double acc = 0.0;
            for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
                std::ptrdiff_t q = std::clamp<std::ptrdiff_t>(pos + t, 0, n - 1);
                acc += k[static_cast<std::size_t>(t + radius)] * cur[base + static_cast<std::size_t>(q) * stride];
            }
            next[idx] = acc;
        }
        std::swap(cur, next);
    }
    return Tensor::from(volume.shape(), std::move(cur));
}

VolumeSample simulate_scan(const Tensor& phantom, const ScannerProfile& profile, std::size_t n_frames,
                           std::uint64_t seed) {
    if (n_frames == 0) throw ConfigError("n_frames must be >= 1");
    Tensor clean = psf_blur(phantom, profile.psf_sigma);
    auto c = clean.data();
    std::vector<double> first(c.size());
    std::vector<double> sum(c.size(), 0.0);
    Rng base(seed);
    for (std::size_t f = 0; f < n_frames; ++f) {
        Rng rng = base.fork(f);
        for (std::size_t i = 0; i < c.size(); ++i) {
            double v = std::clamp(c[i] + profile.noise_scale * rng.normal(), 0.0, 1.0);
            if (f == 0) first[i] = v;
            sum[i] += v;
        }
    }
    for (double& v : sum) v /= static_cast<double>(n_frames);
    VolumeSample s;
    s.short_scan = Tensor::from(clean.shape(), std::move(first));
    s.long_scan = Tensor::from(clean.shape(), std::move(sum));
    s.clean = clean;
    s.scanner_id = profile.id;
    return s;
}

VolumeSample crop_normalize(const VolumeSample& sample, std::size_t crop_size, std::uint64_t seed) {
    Dims3 dims = dims_of(sample.long_scan);
    for (std::size_t d : dims) {
        if (crop_size == 0 || crop_size > d) {
            throw DimensionError("crop " + std::to_string(crop_size) + " does not fit volume " +
                                 shape_str(sample.long_scan.shape()));
        }
    }
    Rng rng(seed);
    Dims3 off{};
    for (std::size_t a = 0; a < 3; ++a) off[a] = rng.index(dims[a] - crop_size + 1);
    auto cut = [&](const Tensor& v) {
        if (!v.defined()) return Tensor();
        auto src = v.data();
        std::vector<double> out;
        out.reserve(crop_size * crop_size * crop_size);
        for (std::size_t i = 0; i < crop_size; ++i) {
            for (std::size_t j = 0; j < crop_size; ++j) {
                std::size_t row = ((off[0] + i) * dims[1] + off[1] + j) * dims[2] + off[2];
                out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(row),
                           src.begin() + static_cast<std::ptrdiff_t>(row + crop_size));
            }
        }
        return Tensor::from({1, crop_size, crop_size, crop_size}, std::move(out));
    };
    VolumeSample s = sample;
    s.short_scan = cut(sample.short_scan);
    s.long_scan = cut(sample.long_scan);
    s.clean = cut(sample.clean);
    return s;
}

std::vector<VolumeSample> make_dataset(const ScannerProfile& profile, std::size_t count, std::size_t crop_size,
                                       std::uint64_t seed, std::size_t n_frames) {
    Rng rng(seed);
    std::vector<VolumeSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t phantom_seed = rng.next_u64();
        std::uint64_t noise_seed = rng.next_u64();
        std::uint64_t crop_seed = rng.next_u64();
        VolumeSample s = simulate_scan(generate_phantom(phantom_seed, profile.resolution), profile, n_frames, noise_seed);
        s.phantom_seed = phantom_seed;
        out.push_back(crop_normalize(s, crop_size, crop_seed));
    }
    return out;
}

void save_volume(const std::filesystem::path& path, const Tensor& volume, const VolumeMeta& meta) {
    nlohmann::json h;
    h["dims"] = volume.shape();
    h["spacing"] = meta.spacing;
    h["scanner_id"] = meta.scanner_id;
    h["dtype"] = "f64";
    h["byte_order"] = "little";
    h["payload_bytes"] = volume.numel() * 8;
    std::string bytes = h.dump() + "\n";
    bytes.push_back('\0');
    append_f64_le(bytes, volume.data());
    atomic_write(path, bytes);
}

LoadedVolume load_volume(const std::filesystem::path& path) {
    std::string bytes = read_file(path);
    auto end = bytes.find(std::string("\n\0", 2));
    if (end == std::string::npos) throw HeaderError(path.string() + ": header terminator not found");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.substr(0, end));
    } catch (const nlohmann::json::exception& e) {
        throw HeaderError(path.string() + ": unreadable header: " + e.what());
    }
    LoadedVolume out;
    Shape dims;
    try {
        dims = h.at("dims").get<Shape>();
        out.meta.spacing = h.at("spacing").get<std::array<double, 3>>();
        out.meta.scanner_id = h.at("scanner_id").get<int>();
        if (h.at("dtype") != "f64" || h.at("byte_order") != "little") {
            throw HeaderError(path.string() + ": only little-endian f64 payloads are supported");
        }
    } catch (const nlohmann::json::exception& e) {
        throw HeaderError(path.string() + ": malformed header field: " + e.what());
    }
    if (dims.empty() || std::find(dims.begin(), dims.end(), 0) != dims.end()) {
        throw HeaderError(path.string() + ": dims must be non-empty and positive");
    }
    std::size_t payload = bytes.size() - end - 2;
    if (h.contains("payload_bytes") && payload < h["payload_bytes"].get<std::size_t>()) {
        throw PayloadError(path.string() + ": payload truncated (" + std::to_string(payload) + " of " +
                           std::to_string(h["payload_bytes"].get<std::size_t>()) + " bytes)");
    }
    if (payload % 8 != 0) {
        throw PayloadError(path.string() + ": payload of " + std::to_string(payload) +
                           " bytes is not a whole number of f64 values");
    }
    std::size_t count = payload / 8;
    if (count != shape_numel(dims)) {
        throw SizeMismatchError(path.string() + ": header dims " + shape_str(dims) + " need " +
                                std::to_string(shape_numel(dims)) + " values, payload has " + std::to_string(count));
    }
    out.volume = Tensor::from(dims, parse_f64_le(bytes.data() + end + 2, count));
    return out;
}

} // namespace voxpeft
