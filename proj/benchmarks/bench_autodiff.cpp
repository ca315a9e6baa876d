#include <benchmark/benchmark.h>

#include "ipat/autodiff.hpp"
#include "ipat/rng.hpp"

using namespace ipat;
using ad::Tape;
using ad::Tensor;

namespace {

Tensor<float> random(ad::Shape shape, std::uint64_t seed, bool grad = false) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return Tensor<float>(shape, v, grad);
}

// Forward and backward through one [B*T, d] x [d, d] product.
void BM_Matmul(benchmark::State& state) {
  const auto d = state.range(0);
  auto x = random({8, 100, d}, 1, true);
  auto w = random({d, d}, 2, true);
  for (auto _ : state) {
    Tape<float> tp;
    auto y = ad::sum(tp, ad::matmul(tp, x, w));
    tp.backward(y);
    benchmark::DoNotOptimize(w.grad().data());
  }
  state.SetItemsProcessed(state.iterations() * 8 * 100 * d * d);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_SelfAttention(benchmark::State& state) {
  const auto T = state.range(0);
  auto q = random({4, T, 64}, 3, true);
  auto k = random({4, T, 64}, 4, true);
  auto v = random({4, T, 64}, 5, true);
  const ad::AttentionMask mask;
  for (auto _ : state) {
    Tape<float> tp;
    auto y = ad::sum(tp, ad::scaled_dot_attention(tp, q, k, v, 2, mask));
    tp.backward(y);
    benchmark::DoNotOptimize(q.grad().data());
  }
}
BENCHMARK(BM_SelfAttention)->Arg(32)->Arg(128);

void BM_Conv1d(benchmark::State& state) {
  auto x = random({4, 200, 64}, 6, true);
  auto w = random({3, 64, 64}, 7, true);
  auto b = random({64}, 8, true);
  for (auto _ : state) {
    Tape<float> tp;
    auto y = ad::sum(tp, ad::conv1d(tp, x, w, b, 2, 1));
    tp.backward(y);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv1d);

}  // namespace

BENCHMARK_MAIN();
