#include "voxpeft/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace voxpeft {

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

std::size_t Rng::index(std::size_t n) {
    // Rejection keeps the draw unbiased.
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
        v = engine_();
    } while (v >= limit);
    return static_cast<std::size_t>(v % n);
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double stddev, double bound_in_stddevs) {
    for (;;) {
        double z = normal();
        if (std::abs(z) <= bound_in_stddevs) {
            return z * stddev;
        }
    }
}

Rng Rng::fork(std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(engine_()), static_cast<std::uint32_t>(salt),
                      static_cast<std::uint32_t>(salt >> 32)};
    std::mt19937_64 child(seq);
    Rng out;
    out.engine_ = child;
    return out;
}

std::string Rng::state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
}

void Rng::set_state(const std::string& state) {
    std::istringstream is(state);
    is >> engine_;
    if (!is) {
        throw FormatError("invalid rng state");
    }
}

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.uniform(lo, hi);
    return Tensor::from(shape, std::move(values));
}

Tensor truncated_normal_tensor(const Shape& shape, Rng& rng, double stddev) {
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = rng.truncated_normal(stddev);
    return Tensor::from(shape, std::move(values));
}

} // namespace voxpeft
