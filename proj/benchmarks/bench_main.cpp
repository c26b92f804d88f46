#include <benchmark/benchmark.h>

#include "polyseg/metrics.hpp"
#include "polyseg/models.hpp"
#include "polyseg/nn/ops.hpp"
#include "polyseg/rng.hpp"

using namespace polyseg;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

Tensor random_mask(Rng& rng, int h, int w) {
    Tensor t({h, w});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    return t;
}

void BM_Conv2dForward(benchmark::State& state) {
    const int c = static_cast<int>(state.range(0));
    Rng rng(1);
    Tensor x = random_tensor(rng, {1, c, 64, 64});
    Tensor w = random_tensor(rng, {c, c, 3, 3});
    Tensor b = random_tensor(rng, {c});
    nn::NoGradGuard ng;
    for (auto _ : state) {
        Tensor y = nn::conv2d(nn::Var::leaf(x), nn::Var::leaf(w), nn::Var::leaf(b), 1).value();
        benchmark::DoNotOptimize(y.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(c) * c * 9 * 64 * 64);
}
BENCHMARK(BM_Conv2dForward)->Arg(8)->Arg(16)->Arg(32);

void BM_ConfusionCounts(benchmark::State& state) {
    Rng rng(2);
    Tensor p = random_mask(rng, 256, 256);
    Tensor t = random_mask(rng, 256, 256);
    for (auto _ : state) {
        auto c = confusion_counts(p, t);
        benchmark::DoNotOptimize(c);
    }
    state.SetItemsProcessed(state.iterations() * 256 * 256);
}
BENCHMARK(BM_ConfusionCounts);

void BM_ForwardPass(benchmark::State& state) {
    const Arch arch = static_cast<Arch>(state.range(0));
    ModelConfig mc;
    mc.arch = arch;
    mc.base_width = 8;
    mc.depth = 2;
    mc.seed = 1;
    Model m = build_model(mc);
    Rng rng(3);
    Tensor batch = random_tensor(rng, {1, 3, 64, 64});
    for (auto _ : state) {
        ModelOutput out = forward(m, batch);
        benchmark::DoNotOptimize(out.main.data());
    }
    state.SetLabel(arch_name(arch));
}
BENCHMARK(BM_ForwardPass)->DenseRange(0, 4);

} // namespace

BENCHMARK_MAIN();
