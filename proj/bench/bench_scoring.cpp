#include <benchmark/benchmark.h>

#include <vector>

#include "mmr/kernels.hpp"
#include "mmr/nn.hpp"
#include "mmr/parallel.hpp"

using namespace mmr;

namespace {

struct Packed {
  std::vector<float> tokens, weights;
  std::vector<std::size_t> offsets, lengths;
  std::size_t c = 0;

  Packed(std::size_t count, std::size_t len, std::size_t c_, std::uint64_t seed) : c(c_) {
    Rng rng(seed);
    tokens.resize(count * len * c);
    for (auto& v : tokens) v = float(rng.normal());
    weights.assign(count * len, 1.0f / float(len));
    for (std::size_t i = 0; i < count; ++i) {
      offsets.push_back(i * len);
      lengths.push_back(len);
    }
  }
  kernels::PackedView<float> view() const {
    return {tokens.data(), weights.data(), offsets.data(), lengths.data(), offsets.size(), c};
  }
};

void BM_ScoreSerial(benchmark::State& st) {
  const Packed q(1, 24, 64, 1), g(std::size_t(st.range(0)), 24, 64, 2);
  std::vector<float> out(g.offsets.size());
  for (auto _ : st) {
    kernels::serial::score_matrix(q.view(), g.view(), Aggregation::Max, out.data());
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_ScoreParallel(benchmark::State& st) {
  const Packed q(1, 24, 64, 1), g(std::size_t(st.range(0)), 24, 64, 2);
  std::vector<float> out(g.offsets.size());
  for (auto _ : st) {
    kernels::score_matrix(q.view(), g.view(), Aggregation::Max, out.data());
    benchmark::DoNotOptimize(out.data());
  }
  st.SetItemsProcessed(st.iterations() * st.range(0));
}

void BM_BatchScoreParallel(benchmark::State& st) {
  const Packed q(64, 16, 32, 3), g(std::size_t(st.range(0)), 16, 32, 4);
  std::vector<float> out(q.offsets.size() * g.offsets.size());
  for (auto _ : st) {
    kernels::score_matrix(q.view(), g.view(), Aggregation::Max, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_BatchScoreSerial(benchmark::State& st) {
  const Packed q(64, 16, 32, 3), g(std::size_t(st.range(0)), 16, 32, 4);
  std::vector<float> out(q.offsets.size() * g.offsets.size());
  for (auto _ : st) {
    kernels::serial::score_matrix(q.view(), g.view(), Aggregation::Max, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_GemmSerial(benchmark::State& st) {
  const std::size_t n = std::size_t(st.range(0));
  const Packed a(1, n, n, 5), b(1, n, n, 6);
  std::vector<float> c(n * n);
  for (auto _ : st) {
    kernels::serial::gemm_nn(n, n, n, a.tokens.data(), b.tokens.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
}

void BM_GemmParallel(benchmark::State& st) {
  const std::size_t n = std::size_t(st.range(0));
  const Packed a(1, n, n, 5), b(1, n, n, 6);
  std::vector<float> c(n * n);
  for (auto _ : st) {
    kernels::gemm_nn(n, n, n, a.tokens.data(), b.tokens.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
}

}  // namespace

BENCHMARK(BM_ScoreSerial)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ScoreParallel)->Arg(1000)->Arg(10000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchScoreSerial)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BatchScoreParallel)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GemmSerial)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_GemmParallel)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
