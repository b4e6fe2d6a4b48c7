// Serial reference kernels against the tiled OpenMP kernels at training shapes.
// Thread count for the parallel variants comes from AXLAB_THREADS.

#include <benchmark/benchmark.h>

#include <vector>

#include "axlab/kernels.hpp"
#include "axlab/rng.hpp"

namespace {

using namespace axlab;

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return v;
}

enum class Variant { nn, nt, tn };

template <Variant V, bool Reference>
void BM_Gemm(benchmark::State& state) {
    const int m = static_cast<int>(state.range(0));
    const int k = static_cast<int>(state.range(1));
    const int n = static_cast<int>(state.range(2));
    // nn: A[m x k] B[k x n]; nt: B is [n x k]; tn: A[m x k]ᵀ B[m x n] -> C[k x n]
    const auto a = random_vec(static_cast<std::size_t>(m) * k, 1);
    const auto b = random_vec(static_cast<std::size_t>(V == Variant::tn ? m : k) * n + static_cast<std::size_t>(n) * k, 2);
    std::vector<float> c(static_cast<std::size_t>(std::max(m, k)) * n);
    for (auto _ : state) {
        if constexpr (V == Variant::nn) {
            if constexpr (Reference) kernels::gemm_nn_reference<float>(a, b, c, m, k, n, false);
            else kernels::gemm_nn<float>(a, b, c, m, k, n, false);
        } else if constexpr (V == Variant::nt) {
            if constexpr (Reference) kernels::gemm_nt_reference<float>(a, b, c, m, k, n, false);
            else kernels::gemm_nt<float>(a, b, c, m, k, n, false);
        } else {
            if constexpr (Reference) kernels::gemm_tn_reference<float>(a, b, c, m, k, n, false);
            else kernels::gemm_tn<float>(a, b, c, m, k, n, false);
        }
        benchmark::DoNotOptimize(c.data());
    }
    state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * k * n, benchmark::Counter::kIsIterationInvariantRate,
                                                  benchmark::Counter::kIs1000);
}

template <bool Reference>
void BM_Attention(benchmark::State& state) {
    const int n_seq = static_cast<int>(state.range(0));
    const int len = static_cast<int>(state.range(1));
    const int d = 64, heads = 4;
    std::vector<kernels::Segment> segs;
    for (int s = 0; s < n_seq; ++s) segs.push_back({s * len, len});
    const int rows = n_seq * len;
    const kernels::AttentionShape shape{rows, d, heads, segs};
    const auto qkv = random_vec(static_cast<std::size_t>(rows) * 3 * d, 3);
    const auto dout = random_vec(static_cast<std::size_t>(rows) * d, 4);
    std::vector<float> out(static_cast<std::size_t>(rows) * d);
    std::vector<float> probs(kernels::attention_prob_size(shape));
    std::vector<float> dqkv(qkv.size());
    for (auto _ : state) {
        if constexpr (Reference) {
            kernels::causal_attention_forward_reference<float>(shape, qkv, out, probs);
            kernels::causal_attention_backward_reference<float>(shape, qkv, probs, dout, dqkv);
        } else {
            kernels::causal_attention_forward<float>(shape, qkv, out, probs);
            kernels::causal_attention_backward<float>(shape, qkv, probs, dout, dqkv);
        }
        benchmark::DoNotOptimize(dqkv.data());
    }
}

void gemm_shapes(benchmark::internal::Benchmark* b) {
    // rows of a 128-example batch x model widths
    b->Args({3328, 64, 192})->Args({3328, 64, 256})->Args({3328, 256, 64})->Args({3328, 64, 293});
}

}  // namespace

BENCHMARK(BM_Gemm<Variant::nn, true>)->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<Variant::nn, false>)->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<Variant::nt, true>)->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<Variant::nt, false>)->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<Variant::tn, true>)->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Gemm<Variant::tn, false>)->Apply(gemm_shapes)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention<true>)->Args({128, 26})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Attention<false>)->Args({128, 26})->Unit(benchmark::kMillisecond);

int main(int argc, char** argv) {
    axlab::kernels::configure_threads_from_env();
    benchmark::Initialize(&argc, argv);
    if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
    benchmark::RunSpecifiedBenchmarks();
    benchmark::Shutdown();
    return 0;
}
