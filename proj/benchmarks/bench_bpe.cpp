#include <benchmark/benchmark.h>

#include "ipat/bpe.hpp"
#include "ipat/rng.hpp"

using namespace ipat;

namespace {

std::vector<std::string> corpus(std::size_t lines, std::uint64_t seed) {
  static const std::vector<std::string> syllables{"ka", "to", "mi", "ne", "su", "ra", "po", "li", "da", "xe"};
  Rng rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < lines; ++i) {
    std::string line;
    for (std::size_t w = 0, n = 1 + rng.below(6); w < n; ++w) {
      if (w) line += ' ';
      for (std::size_t s = 0, m = 1 + rng.below(3); s < m; ++s) line += syllables[rng.below(syllables.size())];
    }
    out.push_back(line);
  }
  return out;
}

void BM_TrainBpe(benchmark::State& state) {
  const auto text = corpus(static_cast<std::size_t>(state.range(0)), 1);
  for (auto _ : state) {
    auto m = bpe::train_bpe(text, 200);
    benchmark::DoNotOptimize(m.merges().size());
  }
}
BENCHMARK(BM_TrainBpe)->Arg(1000)->Arg(10000);

void BM_Encode(benchmark::State& state) {
  const auto text = corpus(2000, 2);
  const auto m = bpe::train_bpe(text, 200);
  std::size_t i = 0;
  for (auto _ : state) {
    auto ids = m.encode(text[i++ % text.size()]);
    benchmark::DoNotOptimize(ids.data());
  }
}
BENCHMARK(BM_Encode);

}  // namespace
