#include <benchmark/benchmark.h>

#include "voxpeft/metrics.hpp"
#include "voxpeft/ops.hpp"
#include "voxpeft/train.hpp"

using namespace voxpeft;

namespace {

Tensor rand_tensor(const Shape& s, std::uint64_t seed) {
    Rng rng(seed);
    return uniform_tensor(s, rng);
}

void BM_Matmul(benchmark::State& st) {
    auto n = static_cast<std::size_t>(st.range(0));
    Tensor a = rand_tensor({n, n}, 1), b = rand_tensor({n, n}, 2);
    for (auto _ : st) benchmark::DoNotOptimize(matmul(a, b));
    st.SetItemsProcessed(st.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Conv3d(benchmark::State& st) {
    auto c = static_cast<std::size_t>(st.range(0));
    Tensor x = rand_tensor({c, 16, 16, 16}, 1), k = rand_tensor({c, c, 3, 3, 3}, 2), b = rand_tensor({c}, 3);
    NoGradGuard g;
    for (auto _ : st) benchmark::DoNotOptimize(conv3d(x, k, b, 1, 1));
}
BENCHMARK(BM_Conv3d)->Arg(4)->Arg(8);

void BM_Ssim3d(benchmark::State& st) {
    auto s = static_cast<std::size_t>(st.range(0));
    Tensor a = rand_tensor({1, s, s, s}, 1), b = rand_tensor({1, s, s, s}, 2);
    for (auto _ : st) benchmark::DoNotOptimize(ssim3d(a, b));
}
BENCHMARK(BM_Ssim3d)->Arg(16)->Arg(32);

void model_step(benchmark::State& st, Variant v, bool petite) {
    Model m = Model::build(ArchConfig::desk(v), 1);
    if (petite) compose(MixPlan::petite(v), m);
    Tensor x = rand_tensor({1, 16, 16, 16}, 4), y = rand_tensor({1, 16, 16, 16}, 5);
    for (auto _ : st) {
        zero_grads(m);
        Tensor loss = mse_loss(forward(m, x), y);
        loss.backward();
        benchmark::DoNotOptimize(loss.item());
    }
}

void model_forward(benchmark::State& st, Variant v) {
    Model m = Model::build(ArchConfig::desk(v), 1);
    Tensor x = rand_tensor({1, 16, 16, 16}, 4);
    NoGradGuard g;
    for (auto _ : st) benchmark::DoNotOptimize(forward(m, x));
}

BENCHMARK_CAPTURE(model_forward, vitvit, Variant::VitVit)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_forward, vitcnn, Variant::VitCnn)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_step, vitvit_full, Variant::VitVit, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_step, vitvit_petite, Variant::VitVit, true)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_step, vitcnn_full, Variant::VitCnn, false)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(model_step, vitcnn_petite, Variant::VitCnn, true)->Unit(benchmark::kMillisecond);

void BM_MergeLora(benchmark::State& st) {
    Model base = Model::build(ArchConfig::desk(Variant::VitVit), 1);
    freeze_all(base);
    apply(PeftMethod::lora(8), Selector::WholeModel, base);
    for (auto _ : st) {
        st.PauseTiming();
        Model m = base.clone();
        st.ResumeTiming();
        merge_lora(m);
    }
}
BENCHMARK(BM_MergeLora);

void BM_DryRunPaperLike(benchmark::State& st) {
    auto cfg = ArchConfig::paper_like(Variant::VitCnn);
    auto plan = MixPlan::petite(Variant::VitCnn);
    for (auto _ : st) benchmark::DoNotOptimize(dry_run_count(cfg, plan));
}
BENCHMARK(BM_DryRunPaperLike);

} // namespace

BENCHMARK_MAIN();
