#include <cmath>
#include <vector>

#include "doctest.h"

#include "axlab/kernels.hpp"
#include "helpers.hpp"

namespace k = axlab::kernels;

namespace {

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

template <typename T>
std::vector<T> randv(std::size_t n, std::uint64_t seed) {
    return testing::random_tensor<T>({static_cast<int>(n)}, seed).storage();
}

// Straight triple loop, independent of both kernel flavours.
std::vector<double> naive_gemm(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n,
                               bool ta, bool tb) {
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p) {
                const double x = ta ? a[p * m + i] : a[i * k + p];
                const double y = tb ? b[j * k + p] : b[p * n + j];
                c[i * n + j] += x * y;
            }
    return c;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("gemm variants match a naive product on awkward shapes") {
    const int shapes[][3] = {{1, 1, 1}, {3, 5, 7}, {17, 9, 33}, {64, 64, 64}, {70, 13, 49}, {5, 130, 3}};
    for (const auto& s : shapes) {
        const int m = s[0], kk = s[1], n = s[2];
        auto a = randv<double>(static_cast<std::size_t>(m) * kk, 1);
        auto b = randv<double>(static_cast<std::size_t>(kk) * n, 2);
        std::vector<double> c(static_cast<std::size_t>(m) * n), r(c.size());
        k::gemm_nn<double>(a, b, c, m, kk, n, false);
        k::gemm_nn_reference<double>(a, b, r, m, kk, n, false);
        auto want = naive_gemm(a, b, m, kk, n, false, false);
        CHECK(max_abs_diff(c, want) < 1e-12);
        CHECK(max_abs_diff(r, want) < 1e-12);

        // B given as [n x k]
        auto bt = randv<double>(static_cast<std::size_t>(n) * kk, 3);
        k::gemm_nt<double>(a, bt, c, m, kk, n, false);
        k::gemm_nt_reference<double>(a, bt, r, m, kk, n, false);
        want = naive_gemm(a, bt, m, kk, n, false, true);
        CHECK(max_abs_diff(c, want) < 1e-12);
        CHECK(max_abs_diff(r, want) < 1e-12);

        // C[k x n] = A[m x k]^T B[m x n]
        auto bm = randv<double>(static_cast<std::size_t>(m) * n, 4);
        std::vector<double> ct(static_cast<std::size_t>(kk) * n), rt(ct.size());
        k::gemm_tn<double>(a, bm, ct, m, kk, n, false);
        k::gemm_tn_reference<double>(a, bm, rt, m, kk, n, false);
        want = naive_gemm(a, bm, kk, m, n, true, false);
        CHECK(max_abs_diff(ct, want) < 1e-12);
        CHECK(max_abs_diff(rt, want) < 1e-12);
    }
}

TEST_CASE("gemm accumulate adds onto existing output") {
    const int m = 9, kk = 4, n = 21;
    auto a = randv<float>(static_cast<std::size_t>(m) * kk, 5);
    auto b = randv<float>(static_cast<std::size_t>(kk) * n, 6);
    std::vector<float> c(static_cast<std::size_t>(m) * n, 1.0f), once(c.size());
    k::gemm_nn<float>(a, b, once, m, kk, n, false);
    k::gemm_nn<float>(a, b, c, m, kk, n, true);
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(once[i] + 1.0f).epsilon(1e-6));
}

TEST_CASE("parallel gemm is bit-identical for any thread count") {
    const int m = 97, kk = 31, n = 67;
    auto a = randv<float>(static_cast<std::size_t>(m) * kk, 7);
    auto b = randv<float>(static_cast<std::size_t>(kk) * n, 8);
    std::vector<float> one(static_cast<std::size_t>(m) * n), four(one.size());
    const int saved = k::thread_count();
    k::set_thread_count(1);
    k::gemm_nn<float>(a, b, one, m, kk, n, false);
    k::set_thread_count(4);
    k::gemm_nn<float>(a, b, four, m, kk, n, false);
    k::set_thread_count(saved);
    CHECK(one == four);
}

TEST_CASE("attention forward and backward agree with the reference") {
    const int d = 12, heads = 3;
    std::vector<k::Segment> segs{{0, 5}, {5, 1}, {6, 9}};
    const int rows = 15;
    k::AttentionShape shape{rows, d, heads, segs};
    auto qkv = randv<double>(static_cast<std::size_t>(rows) * 3 * d, 9);
    const auto np = k::attention_prob_size(shape);
    CHECK(np == static_cast<std::size_t>(heads) * (25 + 1 + 81));
    std::vector<double> out(static_cast<std::size_t>(rows) * d), ref_out(out.size());
    std::vector<double> probs(np), ref_probs(np);
    k::causal_attention_forward<double>(shape, qkv, out, probs);
    k::causal_attention_forward_reference<double>(shape, qkv, ref_out, ref_probs);
    CHECK(max_abs_diff(out, ref_out) < 1e-12);
    CHECK(max_abs_diff(probs, ref_probs) < 1e-12);

    auto dout = randv<double>(out.size(), 10);
    std::vector<double> dq(qkv.size(), 0.0), ref_dq(qkv.size(), 0.0);
    k::causal_attention_backward<double>(shape, qkv, probs, dout, dq);
    k::causal_attention_backward_reference<double>(shape, qkv, ref_probs, dout, ref_dq);
    CHECK(max_abs_diff(dq, ref_dq) < 1e-12);
}

TEST_CASE("attention of a length-one segment returns its value row") {
    const int d = 4, heads = 2;
    std::vector<k::Segment> segs{{0, 1}};
    k::AttentionShape shape{1, d, heads, segs};
    auto qkv = randv<double>(3 * d, 11);
    std::vector<double> out(d), probs(k::attention_prob_size(shape));
    k::causal_attention_forward<double>(shape, qkv, out, probs);
    for (int c = 0; c < d; ++c) CHECK(out[c] == doctest::Approx(qkv[2 * d + c]).epsilon(1e-15));
}

TEST_CASE("thread count reads the environment") {
    const int saved = k::thread_count();
    ::setenv("AXLAB_THREADS", "3", 1);
    k::configure_threads_from_env();
    CHECK(k::thread_count() == 3);
    ::setenv("AXLAB_THREADS", "junk", 1);
    k::configure_threads_from_env();
    CHECK(k::thread_count() == 3);
    ::unsetenv("AXLAB_THREADS");
    k::set_thread_count(saved);
}

}
