// Serial reference kernels against the blocked OpenMP versions.
#include "amoe/kernels.hpp"

#include <benchmark/benchmark.h>

#include <cmath>
#include <random>

using namespace amoe;

namespace {

Tensor filled(std::size_t r, std::size_t c, std::uint64_t seed, bool positive = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Tensor t(r, c);
  for (double& v : t.data) v = positive ? std::exp(0.5 * g(rng)) : g(rng);
  return t;
}

// Shapes of the hot products in training: (B*N) x D activations times D x D weights.
template <bool kRef>
void BM_GemmNN(benchmark::State& st) {
  const auto m = static_cast<std::size_t>(st.range(0)), d = static_cast<std::size_t>(st.range(1));
  const Tensor a = filled(m, d, 1), b = filled(d, d, 2);
  Tensor c;
  for (auto _ : st) {
    if constexpr (kRef) kernels::ref::gemm_nn(a, b, c);
    else kernels::gemm_nn(a, b, c);
    benchmark::DoNotOptimize(c.data.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * m * d * d));
}

template <bool kRef>
void BM_GemmTN(benchmark::State& st) {
  const auto m = static_cast<std::size_t>(st.range(0)), d = static_cast<std::size_t>(st.range(1));
  const Tensor a = filled(m, d, 3), b = filled(m, d, 4);
  Tensor c;
  for (auto _ : st) {
    if constexpr (kRef) kernels::ref::gemm_tn(a, b, c);
    else kernels::gemm_tn(a, b, c);
    benchmark::DoNotOptimize(c.data.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * m * d * d));
}

template <bool kRef>
void BM_GemmNT(benchmark::State& st) {
  const auto m = static_cast<std::size_t>(st.range(0)), d = static_cast<std::size_t>(st.range(1));
  const Tensor a = filled(m, d, 5), b = filled(d, d, 6);
  Tensor c;
  for (auto _ : st) {
    if constexpr (kRef) kernels::ref::gemm_nt(a, b, c);
    else kernels::gemm_nt(a, b, c);
    benchmark::DoNotOptimize(c.data.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * m * d * d));
}

// 16 sequences of seq_len tokens, as in a training batch.
template <bool kRef>
void BM_LinearAttention(benchmark::State& st) {
  const auto len = static_cast<std::size_t>(st.range(0)), d = static_cast<std::size_t>(st.range(1));
  const Tensor q = filled(16 * len, d, 7, true), k = filled(16 * len, d, 8, true), v = filled(16 * len, d, 9);
  Tensor out, kv, ks;
  for (auto _ : st) {
    if constexpr (kRef) kernels::ref::linear_attention_fwd(q, k, v, len, 1e-6, out, kv, ks);
    else kernels::linear_attention_fwd(q, k, v, len, 1e-6, out, kv, ks);
    benchmark::DoNotOptimize(out.data.data());
  }
  st.SetItemsProcessed(static_cast<std::int64_t>(st.iterations() * 16 * len));
}

void shapes(benchmark::internal::Benchmark* b) {
  for (int m : {784, 3136})
    for (int d : {32, 64}) b->Args({m, d});
}

}  // namespace

BENCHMARK(BM_GemmNN<true>)->Name("gemm_nn/ref")->Apply(shapes);
BENCHMARK(BM_GemmNN<false>)->Name("gemm_nn/omp")->Apply(shapes);
BENCHMARK(BM_GemmTN<true>)->Name("gemm_tn/ref")->Apply(shapes);
BENCHMARK(BM_GemmTN<false>)->Name("gemm_tn/omp")->Apply(shapes);
BENCHMARK(BM_GemmNT<true>)->Name("gemm_nt/ref")->Apply(shapes);
BENCHMARK(BM_GemmNT<false>)->Name("gemm_nt/omp")->Apply(shapes);
BENCHMARK(BM_LinearAttention<true>)->Name("linear_attention/ref")->Args({196, 32})->Args({1024, 32});
BENCHMARK(BM_LinearAttention<false>)->Name("linear_attention/omp")->Args({196, 32})->Args({1024, 32});

BENCHMARK_MAIN();
