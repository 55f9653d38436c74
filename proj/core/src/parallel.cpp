#include "voxpeft/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace voxpeft {

namespace {
std::atomic<std::size_t> g_threads{1};
constexpr std::size_t kMinWorkPerThread = 1 << 18;
} // namespace

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }

std::size_t num_threads() { return g_threads; }

void parallel_for(std::size_t n, std::size_t work, const std::function<void(std::size_t)>& body) {
    std::size_t workers = std::min({g_threads.load(), n, std::max<std::size_t>(1, work / kMinWorkPerThread)});
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    auto run = [&](std::size_t w) {
        for (std::size_t i = w; i < n; i += workers) {
            body(i);
        }
    };
    for (std::size_t w = 1; w < workers; ++w) {
        pool.emplace_back(run, w);
    }
    run(0);
}

} // namespace voxpeft
