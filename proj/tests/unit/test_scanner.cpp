#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "voxpeft/errors.hpp"
#include "voxpeft/metrics.hpp"
#include "voxpeft/scanner.hpp"

using namespace voxpeft;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto dir = fs::temp_directory_path() / "voxpeft_scanner_tests";
    fs::create_directories(dir);
    return dir / name;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double w = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) w = std::max(w, std::abs(a.data()[i] - b.data()[i]));
    return w;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

void write_raw(const fs::path& p, const std::string& header, std::size_t n_values) {
    std::ofstream f(p, std::ios::binary);
    f << header << '\n' << '\0';
    std::vector<double> v(n_values, 0.25);
    f.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 8));
}

} // namespace

TEST(Profiles, MatchPublishedSpecifications) {
    struct Row {
        Dims3 res;
        std::array<double, 3> sp;
    };
    const Row rows[5] = {
        {{192, 192, 136}, {1.21875, 1.21875, 1.21875}},
        {{192, 192, 128}, {1.21875, 1.21875, 1.21875}},
        {{224, 224, 81}, {1.01821, 1.01821, 2.02699}},
        {{128, 128, 90}, {2, 2, 2}},
        {{128, 128, 63}, {2.05941, 2.05941, 2.425}},
    };
    ASSERT_EQ(scanner_profiles().size(), 5u);
    for (int id = 1; id <= 5; ++id) {
        auto p = scanner_profile(id);
        EXPECT_EQ(p.id, id);
        EXPECT_EQ(p.resolution, rows[id - 1].res) << id;
        EXPECT_EQ(p.spacing, rows[id - 1].sp) << id;
        EXPECT_GT(p.noise_scale, 0.0);
        EXPECT_GT(p.psf_sigma, 0.0);
    }
    EXPECT_THROW(scanner_profile(0), ConfigError);
    EXPECT_THROW(scanner_profile(6), ConfigError);
}

TEST(Profiles, MiniTwinsKeepFieldOfView) {
    for (int id = 1; id <= 5; ++id) {
        auto full = scanner_profile(id);
        auto mini = mini_profile(id, 32, 16);
        EXPECT_EQ(*std::max_element(mini.resolution.begin(), mini.resolution.end()), 32u);
        for (std::size_t a = 0; a < 3; ++a) {
            EXPECT_GE(mini.resolution[a], 16u);
            EXPECT_NEAR(mini.resolution[a] * mini.spacing[a], full.resolution[a] * full.spacing[a], 1e-9);
        }
        EXPECT_EQ(mini.noise_scale, full.noise_scale);
    }
    // 90/128 of 32 rounds to 23.
    EXPECT_EQ(mini_profile(4).resolution, (Dims3{32, 32, 23}));
}

TEST(Phantom, DeterministicBoundedAndSeedSensitive) {
    Tensor a = generate_phantom(11, 16), b = generate_phantom(11, 16), c = generate_phantom(12, 16);
    EXPECT_TRUE(bitwise_equal(a, b));
    EXPECT_GT(max_abs_diff(a, c), 0.0);
    auto [lo, hi] = std::minmax_element(a.data().begin(), a.data().end());
    EXPECT_GE(*lo, 0.0);
    EXPECT_LE(*hi, 1.0);
    EXPECT_EQ(generate_phantom(3, Dims3{10, 12, 9}).shape(), (Shape{1, 10, 12, 9}));
    EXPECT_THROW(generate_phantom(3, 7), ConfigError);
}

TEST(Simulate, ZeroNoiseGivesBlurredPhantom) {
    auto p = mini_profile(2);
    p.noise_scale = 0.0;
    Tensor ph = generate_phantom(5, 16);
    auto s = simulate_scan(ph, p, 6, 1);
    Tensor blur = psf_blur(ph, p.psf_sigma);
    EXPECT_LT(max_abs_diff(s.short_scan, blur), 1e-15);
    EXPECT_LT(max_abs_diff(s.long_scan, blur), 1e-15);
    EXPECT_LT(max_abs_diff(s.clean, blur), 1e-15);
}

TEST(Simulate, BlurOfConstantIsConstantAndZeroSigmaCopies) {
    Tensor c = Tensor::full({1, 9, 9, 9}, 0.4);
    EXPECT_LT(max_abs_diff(psf_blur(c, 1.3), c), 1e-14);
    Tensor ph = generate_phantom(2, 12);
    EXPECT_TRUE(bitwise_equal(psf_blur(ph, 0.0), ph));
}

TEST(Simulate, AveragingDividesVarianceByFrameCount) {
    ScannerProfile p = mini_profile(1);
    p.noise_scale = 0.05;
    p.psf_sigma = 0.0;
    // Mid-grey volume so clamping to [0, 1] never triggers.
    Tensor ph = Tensor::full({1, 10, 10, 10}, 0.5);
    double acc = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        auto s = simulate_scan(ph, p, 6, 1000 + t);
        double v = 0;
        for (std::size_t i = 0; i < ph.numel(); ++i) v += std::pow(s.long_scan.data()[i] - 0.5, 2);
        acc += v / double(ph.numel());
    }
    double want = p.noise_scale * p.noise_scale / 6.0;
    EXPECT_NEAR(acc / trials, want, 0.2 * want);
}

TEST(Simulate, LongScanBeatsShortScan) {
    for (int id = 1; id <= 5; ++id) {
        auto p = mini_profile(id);
        double mse_short = 0, mse_long = 0, psnr_short = 0, psnr_long = 0;
        for (std::uint64_t seed = 0; seed < 50; ++seed) {
            auto s = simulate_scan(generate_phantom(seed, 12), p, 6, seed + 77);
            double a = 0, b = 0;
            for (std::size_t i = 0; i < s.clean.numel(); ++i) {
                a += std::pow(s.short_scan.data()[i] - s.clean.data()[i], 2);
                b += std::pow(s.long_scan.data()[i] - s.clean.data()[i], 2);
            }
            mse_short += a;
            mse_long += b;
            psnr_short += psnr(s.short_scan, s.clean);
            psnr_long += psnr(s.long_scan, s.clean);
        }
        EXPECT_GT(mse_short, mse_long) << id;
        EXPECT_GT(psnr_long, psnr_short) << id;
    }
}

TEST(Simulate, ClampedAndShaped) {
    auto s = simulate_scan(generate_phantom(1, Dims3{12, 10, 9}), mini_profile(5), 6, 3);
    for (const Tensor* t : {&s.short_scan, &s.long_scan, &s.clean}) {
        EXPECT_EQ(t->shape(), (Shape{1, 12, 10, 9}));
        for (double v : t->data()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
    }
    EXPECT_EQ(s.scanner_id, 5);
    EXPECT_THROW(simulate_scan(generate_phantom(1, 8), mini_profile(1), 0, 3), ConfigError);
}

TEST(Crop, IdentityAlignmentDeterminism) {
    auto s = simulate_scan(generate_phantom(4, 12), mini_profile(3), 6, 9);
    auto same = crop_normalize(s, 12, 1);
    EXPECT_TRUE(bitwise_equal(same.short_scan, s.short_scan));
    EXPECT_TRUE(bitwise_equal(same.long_scan, s.long_scan));

    auto a = crop_normalize(s, 8, 5), b = crop_normalize(s, 8, 5);
    EXPECT_TRUE(bitwise_equal(a.long_scan, b.long_scan));
    EXPECT_EQ(a.short_scan.shape(), (Shape{1, 8, 8, 8}));

    // The clean crop locates the window; short and long must come from the same offset.
    bool found = false;
    for (std::size_t x = 0; x + 8 <= 12 && !found; ++x)
        for (std::size_t y = 0; y + 8 <= 12 && !found; ++y)
            for (std::size_t z = 0; z + 8 <= 12 && !found; ++z) {
                bool ok = true;
                for (std::size_t i = 0; i < 8 && ok; ++i)
                    for (std::size_t j = 0; j < 8 && ok; ++j)
                        for (std::size_t k = 0; k < 8 && ok; ++k) {
                            std::size_t src = ((x + i) * 12 + y + j) * 12 + z + k, dst = (i * 8 + j) * 8 + k;
                            ok = s.clean.data()[src] == a.clean.data()[dst] &&
                                 s.short_scan.data()[src] == a.short_scan.data()[dst] &&
                                 s.long_scan.data()[src] == a.long_scan.data()[dst];
                        }
                found = ok;
            }
    EXPECT_TRUE(found);
    EXPECT_THROW(crop_normalize(s, 13, 1), DimensionError);
}

TEST(Dataset, DeterministicCount) {
    auto a = make_dataset(mini_profile(1), 3, 8, 42), b = make_dataset(mini_profile(1), 3, 8, 42);
    ASSERT_EQ(a.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_TRUE(bitwise_equal(a[i].short_scan, b[i].short_scan));
        EXPECT_EQ(a[i].phantom_seed, b[i].phantom_seed);
        EXPECT_EQ(a[i].scanner_id, 1);
    }
    EXPECT_NE(a[0].phantom_seed, a[1].phantom_seed);
}

TEST(VolumeFile, RoundTripIsBitwise) {
    auto path = scratch("rt.vol");
    Tensor v = generate_phantom(8, Dims3{9, 8, 10});
    VolumeMeta meta{{1.01821, 1.01821, 2.02699}, 3};
    save_volume(path, v, meta);
    auto back = load_volume(path);
    EXPECT_TRUE(bitwise_equal(back.volume, v));
    EXPECT_EQ(back.meta, meta);
}

TEST(VolumeFile, DistinctErrors) {
    auto good = scratch("good.vol");
    save_volume(good, generate_phantom(1, 8), {});
    std::string bytes;
    {
        std::ifstream f(good, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(f), {});
    }
    auto trunc = scratch("trunc.vol");
    {
        std::ofstream f(trunc, std::ios::binary);
        f.write(bytes.data(), std::streamsize(bytes.size() - 100));
    }
    EXPECT_THROW(load_volume(trunc), PayloadError);

    auto garbage = scratch("garbage.vol");
    {
        std::ofstream f(garbage, std::ios::binary);
        f << "{not json\n" << '\0';
    }
    EXPECT_THROW(load_volume(garbage), HeaderError);

    auto noterm = scratch("noterm.vol");
    {
        std::ofstream f(noterm, std::ios::binary);
        f << "{\"dims\":[1,2,2,2]}";
    }
    EXPECT_THROW(load_volume(noterm), HeaderError);

    auto mismatch = scratch("mismatch.vol");
    write_raw(mismatch,
              R"({"dims":[1,2,2,2],"spacing":[1,1,1],"scanner_id":1,"dtype":"f64","byte_order":"little"})", 7);
    EXPECT_THROW(load_volume(mismatch), SizeMismatchError);

    auto big_endian = scratch("be.vol");
    write_raw(big_endian,
              R"({"dims":[1,2,2,2],"spacing":[1,1,1],"scanner_id":1,"dtype":"f64","byte_order":"big"})", 8);
    EXPECT_THROW(load_volume(big_endian), HeaderError);
}
