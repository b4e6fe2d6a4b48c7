#pragma once

// Dense compute kernels. Every kernel has an OpenMP-parallel version used by
// the autodiff engine and a plain serial `_reference` version kept for tests
// and benchmarks. Parallel versions partition work over disjoint output rows
// (or disjoint attention heads), so results do not depend on the thread count.

#include <span>

namespace axlab::kernels {

/// Worker-thread cap for all parallel kernels. Defaults to 1.
int thread_count();
void set_thread_count(int n);
/// Reads AXLAB_THREADS; leaves the current setting untouched if unset or invalid.
void configure_threads_from_env();

// C[m x n] (+)= A[m x k] * B[k x n]
template <typename T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
             bool accumulate);
template <typename T>
void gemm_nn_reference(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
                       bool accumulate);

// C[m x n] (+)= A[m x k] * B[n x k]^T
template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
             bool accumulate);
template <typename T>
void gemm_nt_reference(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
                       bool accumulate);

// C[k x n] (+)= A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
             bool accumulate);
template <typename T>
void gemm_tn_reference(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
                       bool accumulate);

/// A contiguous run of rows that forms one independent sequence.
struct Segment {
    int start = 0;
    int len = 0;
};

/// Layout of a packed multi-head causal self-attention problem. The input
/// `qkv` is [rows x 3*d_model] with Q, K, V side by side; heads split each of
/// them into n_heads column blocks. Attention never crosses segments.
struct AttentionShape {
    int rows = 0;
    int d_model = 0;
    int n_heads = 0;
    std::span<const Segment> segments;

    int head_dim() const { return d_model / n_heads; }
};

/// Number of probability entries the forward pass stores (sum of len^2 per head).
std::size_t attention_prob_size(const AttentionShape& shape);

template <typename T>
void causal_attention_forward(const AttentionShape& shape, std::span<const T> qkv, std::span<T> out,
                              std::span<T> probs);
template <typename T>
void causal_attention_forward_reference(const AttentionShape& shape, std::span<const T> qkv,
                                        std::span<T> out, std::span<T> probs);

// Accumulates into dqkv.
template <typename T>
void causal_attention_backward(const AttentionShape& shape, std::span<const T> qkv, std::span<const T> probs,
                               std::span<const T> dout, std::span<T> dqkv);
template <typename T>
void causal_attention_backward_reference(const AttentionShape& shape, std::span<const T> qkv,
                                         std::span<const T> probs, std::span<const T> dout,
                                         std::span<T> dqkv);

}  // namespace axlab::kernels
