#include <benchmark/benchmark.h>

#include "dx/kernels.hpp"
#include "dx/random.hpp"

namespace {

struct Operands {
  std::vector<float> patches, protos;
  std::vector<double> patch_norms, proto_norms;
  std::size_t n, t, d;

  Operands(std::size_t n_, std::size_t t_, std::size_t d_) : n(n_), t(t_), d(d_) {
    dx::Rng rng(7);
    patches.resize(n * d);
    protos.resize(t * d);
    for (auto& v : patches) v = static_cast<float>(rng.normal());
    for (auto& v : protos) v = static_cast<float>(rng.normal());
    std::size_t zero = 0;
    patch_norms = dx::kernels::row_norms(a(), zero);
    proto_norms = dx::kernels::row_norms(b(), zero);
  }
  dx::MatrixRef a() const { return {patches, n, d}; }
  dx::MatrixRef b() const { return {protos, t, d}; }
};

const Operands& ops(std::size_t n) {
  static const Operands small(10000, 32, 512), large(100000, 32, 512);
  return n == 10000 ? small : large;
}

void BM_CosineSerial(benchmark::State& st) {
  const auto& o = ops(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(dx::kernels::cosine_serial(o.a(), o.b(), o.patch_norms, o.proto_norms));
  st.SetItemsProcessed(st.iterations() * static_cast<int64_t>(o.n));
}

void BM_CosineParallel(benchmark::State& st) {
  const auto& o = ops(st.range(0));
  for (auto _ : st) benchmark::DoNotOptimize(dx::kernels::cosine_parallel(o.a(), o.b(), o.patch_norms, o.proto_norms));
  st.SetItemsProcessed(st.iterations() * static_cast<int64_t>(o.n));
}

void BM_ArgmaxSerial(benchmark::State& st) {
  const auto& o = ops(st.range(0));
  const auto s = dx::kernels::cosine_parallel(o.a(), o.b(), o.patch_norms, o.proto_norms);
  for (auto _ : st) benchmark::DoNotOptimize(dx::kernels::argmax_rows_serial(s));
}

void BM_ArgmaxParallel(benchmark::State& st) {
  const auto& o = ops(st.range(0));
  const auto s = dx::kernels::cosine_parallel(o.a(), o.b(), o.patch_norms, o.proto_norms);
  for (auto _ : st) benchmark::DoNotOptimize(dx::kernels::argmax_rows_parallel(s));
}

}  // namespace

BENCHMARK(BM_CosineSerial)->Arg(10000)->Arg(100000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_CosineParallel)->Arg(10000)->Arg(100000)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ArgmaxSerial)->Arg(10000)->Arg(100000)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_ArgmaxParallel)->Arg(10000)->Arg(100000)->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
