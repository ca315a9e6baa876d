#include <benchmark/benchmark.h>

#include <cmath>
#include <numbers>

#include "ipat/frontend.hpp"

using namespace ipat;

namespace {

void BM_LogMel(benchmark::State& state) {
  const double rate = 16000.0;
  std::vector<float> samples(static_cast<std::size_t>(rate * static_cast<double>(state.range(0))));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i] = static_cast<float>(0.3 * std::sin(2.0 * std::numbers::pi * 440.0 * static_cast<double>(i) / rate));
  }
  for (auto _ : state) {
    auto f = frontend::compute_logmel(samples, rate);
    benchmark::DoNotOptimize(f.data.data());
  }
  state.SetLabel(std::to_string(state.range(0)) + "s of audio");
}
BENCHMARK(BM_LogMel)->Arg(1)->Arg(10);

}  // namespace
