#include <benchmark/benchmark.h>

#include <cmath>

#include "ipat/ctc.hpp"
#include "ipat/rng.hpp"

using namespace ipat;

namespace {

std::vector<double> log_softmax_rows(int T, int V, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> lp(static_cast<std::size_t>(T * V));
  for (int t = 0; t < T; ++t) {
    double z = 0.0;
    for (int v = 0; v < V; ++v) z += std::exp(lp[t * V + v] = rng.uniform(-3.0, 3.0));
    for (int v = 0; v < V; ++v) lp[t * V + v] -= std::log(z);
  }
  return lp;
}

// Forward-backward at encoder-output lengths; target length T / 4.
void BM_CtcLoss(benchmark::State& state) {
  const int T = static_cast<int>(state.range(0));
  const int V = static_cast<int>(state.range(1));
  const auto lp = log_softmax_rows(T, V, 1);
  std::vector<int> target;
  for (int i = 0; i < T / 4; ++i) target.push_back(1 + i % (V - 1));
  for (auto _ : state) {
    auto r = ctc::ctc_loss<double>(lp, T, V, target);
    benchmark::DoNotOptimize(r.loss);
  }
}
BENCHMARK(BM_CtcLoss)->Args({50, 60})->Args({200, 60})->Args({200, 500});

}  // namespace
