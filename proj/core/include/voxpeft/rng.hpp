#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "voxpeft/tensor.hpp"

namespace voxpeft {

// Seeded generator whose output is identical across standard libraries: the
// engine is std::mt19937_64 (fully specified) and the distributions are
// computed here rather than through implementation-defined <random> ones.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    double uniform(); // [0, 1)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::size_t index(std::size_t n); // [0, n)
    double normal();
    double truncated_normal(double stddev, double bound_in_stddevs = 2.0);

    // Derives an independent stream; used to give subsystems their own seeds.
    Rng fork(std::uint64_t salt);

    std::string state() const;
    void set_state(const std::string& state);

private:
    std::mt19937_64 engine_;
};

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0);
Tensor truncated_normal_tensor(const Shape& shape, Rng& rng, double stddev);

template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::swap(items[i - 1], items[rng.index(i)]);
    }
}

} // namespace voxpeft
