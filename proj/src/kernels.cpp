#include "axlab/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <vector>

#include <omp.h>

namespace axlab::kernels {

namespace {

std::atomic<int> g_threads{1};

// 64-byte SIMD vector of T (GCC/Clang vector extension). Loads and stores go
// through memcpy so B and C need no particular alignment.
template <typename T>
struct Simd {
    static constexpr int kLanes = 64 / static_cast<int>(sizeof(T));
    typedef T Vec __attribute__((vector_size(64)));

    static Vec load(const T* p) {
        Vec v;
        __builtin_memcpy(&v, p, sizeof(Vec));
        return v;
    }
    static void store(T* p, Vec v) { __builtin_memcpy(p, &v, sizeof(Vec)); }
    static Vec splat(T x) { return Vec{} + x; }
};

// R rows x NV vectors of C held in registers. Each C element accumulates over
// p in ascending order, exactly like the reference kernel. `ldb` is the row
// stride of B, `ldc` the row stride of C; `cols` < NV * lanes stores only the
// leading columns (used for the packed tail).
template <typename T, int R, int NV>
inline void gemm_tile(const T* a, const T* b, T* c, int k, int ldb, int ldc, int cols, bool accumulate) {
    using S = Simd<T>;
    using V = typename S::Vec;
    constexpr int L = S::kLanes;
    V acc[R][NV];
    const bool full = cols == NV * L;
#pragma GCC unroll 8
    for (int r = 0; r < R; ++r) {
#pragma GCC unroll 8
        for (int v = 0; v < NV; ++v) {
            if (accumulate && full) {
                acc[r][v] = S::load(c + static_cast<std::size_t>(r) * ldc + v * L);
            } else if (accumulate) {
                T tmp[L] = {};
                const int m = std::clamp(cols - v * L, 0, L);
                for (int j = 0; j < m; ++j) tmp[j] = c[static_cast<std::size_t>(r) * ldc + v * L + j];
                acc[r][v] = S::load(tmp);
            } else {
                acc[r][v] = V{};
            }
        }
    }
    for (int p = 0; p < k; ++p) {
        const T* brow = b + static_cast<std::size_t>(p) * ldb;
        V bv[NV];
#pragma GCC unroll 8
        for (int v = 0; v < NV; ++v) bv[v] = S::load(brow + v * L);
#pragma GCC unroll 8
        for (int r = 0; r < R; ++r) {
            const V av = S::splat(a[static_cast<std::size_t>(r) * k + p]);
#pragma GCC unroll 8
            for (int v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
        }
    }
#pragma GCC unroll 8
    for (int r = 0; r < R; ++r) {
#pragma GCC unroll 8
        for (int v = 0; v < NV; ++v) {
            if (full) {
                S::store(c + static_cast<std::size_t>(r) * ldc + v * L, acc[r][v]);
            } else {
                T tmp[L];
                S::store(tmp, acc[r][v]);
                const int m = std::clamp(cols - v * L, 0, L);
                for (int j = 0; j < m; ++j) c[static_cast<std::size_t>(r) * ldc + v * L + j] = tmp[j];
            }
        }
    }
}

// B's trailing n % lanes columns copied into a zero-padded [k x lanes] block.
template <typename T>
struct PackedTail {
    int j0 = 0;
    int cols = 0;
    std::vector<T> data;
};

template <typename T>
PackedTail<T> pack_tail(const T* b, int k, int n) {
    constexpr int L = Simd<T>::kLanes;
    PackedTail<T> t;
    t.j0 = n - n % L;
    t.cols = n % L;
    if (t.cols == 0) return t;
    t.data.assign(static_cast<std::size_t>(k) * L, T(0));
    for (int p = 0; p < k; ++p) {
        for (int j = 0; j < t.cols; ++j) {
            t.data[static_cast<std::size_t>(p) * L + j] = b[static_cast<std::size_t>(p) * n + t.j0 + j];
        }
    }
    return t;
}

template <typename T, int R>
inline void gemm_rows(const T* a, const T* b, T* c, int k, int n, const PackedTail<T>& tail, bool accumulate) {
    constexpr int L = Simd<T>::kLanes;
    int j0 = 0;
    for (; j0 + 4 * L <= n; j0 += 4 * L) gemm_tile<T, R, 4>(a, b + j0, c + j0, k, n, n, 4 * L, accumulate);
    for (; j0 + L <= n; j0 += L) gemm_tile<T, R, 1>(a, b + j0, c + j0, k, n, n, L, accumulate);
    if (tail.cols > 0) gemm_tile<T, R, 1>(a, tail.data.data(), c + tail.j0, k, L, n, tail.cols, accumulate);
}

template <typename T>
void transpose_into(const T* src, int rows, int cols, std::vector<T>& dst) {
    dst.resize(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
        }
    }
}

struct HeadTask {
    int segment;
    int head;
    std::size_t prob_offset;
};

std::vector<HeadTask> head_tasks(const AttentionShape& shape) {
    std::vector<HeadTask> tasks;
    tasks.reserve(shape.segments.size() * static_cast<std::size_t>(shape.n_heads));
    std::size_t off = 0;
    for (std::size_t s = 0; s < shape.segments.size(); ++s) {
        const auto len = static_cast<std::size_t>(shape.segments[s].len);
        for (int h = 0; h < shape.n_heads; ++h) {
            tasks.push_back({static_cast<int>(s), h, off});
            off += len * len;
        }
    }
    return tasks;
}

}  // namespace

int thread_count() { return g_threads.load(); }

void set_thread_count(int n) { g_threads.store(std::max(1, n)); }

void configure_threads_from_env() {
    const char* env = std::getenv("AXLAB_THREADS");
    if (env == nullptr) return;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1 && v <= 1024) set_thread_count(static_cast<int>(v));
}

template <typename T>
void gemm_nn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n, bool accumulate) {
    const int blocks = (m + 3) / 4;
    const int threads = thread_count();
    const auto tail = pack_tail(b.data(), k, n);
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1)
    for (int blk = 0; blk < blocks; ++blk) {
        const int i0 = blk * 4;
        const T* ap = a.data() + static_cast<std::size_t>(i0) * k;
        T* cp = c.data() + static_cast<std::size_t>(i0) * n;
        switch (std::min(4, m - i0)) {
            case 4: gemm_rows<T, 4>(ap, b.data(), cp, k, n, tail, accumulate); break;
            case 3: gemm_rows<T, 3>(ap, b.data(), cp, k, n, tail, accumulate); break;
            case 2: gemm_rows<T, 2>(ap, b.data(), cp, k, n, tail, accumulate); break;
            default: gemm_rows<T, 1>(ap, b.data(), cp, k, n, tail, accumulate); break;
        }
    }
}

template <typename T>
void gemm_nn_reference(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
                       bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T s = accumulate ? c[static_cast<std::size_t>(i) * n + j] : T(0);
            for (int p = 0; p < k; ++p) {
                s += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
            }
            c[static_cast<std::size_t>(i) * n + j] = s;
        }
    }
}

template <typename T>
void gemm_nt(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n, bool accumulate) {
    std::vector<T> bt;
    transpose_into(b.data(), n, k, bt);
    gemm_nn<T>(a, bt, c, m, k, n, accumulate);
}

template <typename T>
void gemm_nt_reference(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
                       bool accumulate) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T s = accumulate ? c[static_cast<std::size_t>(i) * n + j] : T(0);
            for (int p = 0; p < k; ++p) {
                s += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(j) * k + p];
            }
            c[static_cast<std::size_t>(i) * n + j] = s;
        }
    }
}

template <typename T>
void gemm_tn(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n, bool accumulate) {
    std::vector<T> at;
    transpose_into(a.data(), m, k, at);
    gemm_nn<T>(at, b, c, k, m, n, accumulate);
}

template <typename T>
void gemm_tn_reference(std::span<const T> a, std::span<const T> b, std::span<T> c, int m, int k, int n,
                       bool accumulate) {
    for (int r = 0; r < k; ++r) {
        for (int j = 0; j < n; ++j) {
            T s = accumulate ? c[static_cast<std::size_t>(r) * n + j] : T(0);
            for (int i = 0; i < m; ++i) {
                s += a[static_cast<std::size_t>(i) * k + r] * b[static_cast<std::size_t>(i) * n + j];
            }
            c[static_cast<std::size_t>(r) * n + j] = s;
        }
    }
}

std::size_t attention_prob_size(const AttentionShape& shape) {
    std::size_t total = 0;
    for (const auto& s : shape.segments) {
        total += static_cast<std::size_t>(s.len) * static_cast<std::size_t>(s.len);
    }
    return total * static_cast<std::size_t>(shape.n_heads);
}

template <typename T>
void causal_attention_forward(const AttentionShape& shape, std::span<const T> qkv, std::span<T> out,
                              std::span<T> probs) {
    const int d = shape.d_model;
    const int dh = shape.head_dim();
    const int stride = 3 * d;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto tasks = head_tasks(shape);
    const int threads = thread_count();
#pragma omp parallel for schedule(dynamic, 4) num_threads(threads) if (threads > 1)
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& task = tasks[t];
        const Segment seg = shape.segments[static_cast<std::size_t>(task.segment)];
        const int L = seg.len;
        const T* base = qkv.data() + static_cast<std::size_t>(seg.start) * stride;
        const int qc = task.head * dh;
        const int kc = d + qc;
        const int vc = 2 * d + qc;
        T* p = probs.data() + task.prob_offset;
        for (int i = 0; i < L; ++i) {
            const T* qi = base + static_cast<std::size_t>(i) * stride + qc;
            T* prow = p + static_cast<std::size_t>(i) * L;
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j <= i; ++j) {
                const T* kj = base + static_cast<std::size_t>(j) * stride + kc;
                T s = 0;
                for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
                s *= scale;
                prow[j] = s;
                mx = std::max(mx, s);
            }
            T z = 0;
            for (int j = 0; j <= i; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                z += prow[j];
            }
            const T inv = T(1) / z;
            for (int j = 0; j <= i; ++j) prow[j] *= inv;
            for (int j = i + 1; j < L; ++j) prow[j] = 0;
            T* oi = out.data() + static_cast<std::size_t>(seg.start + i) * d + qc;
            for (int c = 0; c < dh; ++c) oi[c] = 0;
            for (int j = 0; j <= i; ++j) {
                const T* vj = base + static_cast<std::size_t>(j) * stride + vc;
                const T w = prow[j];
                for (int c = 0; c < dh; ++c) oi[c] += w * vj[c];
            }
        }
    }
}

// Straightforward dense formulation: full score matrix, -inf above the
// diagonal, row softmax over the whole row.
template <typename T>
void causal_attention_forward_reference(const AttentionShape& shape, std::span<const T> qkv,
                                        std::span<T> out, std::span<T> probs) {
    const int d = shape.d_model;
    const int dh = shape.head_dim();
    const int stride = 3 * d;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const T neg_inf = -std::numeric_limits<T>::infinity();
    std::size_t off = 0;
    for (const auto& seg : shape.segments) {
        const int L = seg.len;
        for (int h = 0; h < shape.n_heads; ++h) {
            std::vector<T> s(static_cast<std::size_t>(L) * L);
            for (int i = 0; i < L; ++i) {
                for (int j = 0; j < L; ++j) {
                    T acc = 0;
                    for (int c = 0; c < dh; ++c) {
                        acc += qkv[static_cast<std::size_t>(seg.start + i) * stride + h * dh + c] *
                               qkv[static_cast<std::size_t>(seg.start + j) * stride + d + h * dh + c];
                    }
                    s[static_cast<std::size_t>(i) * L + j] = j > i ? neg_inf : acc * scale;
                }
            }
            for (int i = 0; i < L; ++i) {
                T mx = neg_inf;
                for (int j = 0; j < L; ++j) mx = std::max(mx, s[static_cast<std::size_t>(i) * L + j]);
                T z = 0;
                for (int j = 0; j < L; ++j) {
                    auto& v = s[static_cast<std::size_t>(i) * L + j];
                    v = std::exp(v - mx);
                    z += v;
                }
                for (int j = 0; j < L; ++j) {
                    probs[off + static_cast<std::size_t>(i) * L + j] = s[static_cast<std::size_t>(i) * L + j] / z;
                }
                for (int c = 0; c < dh; ++c) {
                    T acc = 0;
                    for (int j = 0; j < L; ++j) {
                        acc += probs[off + static_cast<std::size_t>(i) * L + j] *
                               qkv[static_cast<std::size_t>(seg.start + j) * stride + 2 * d + h * dh + c];
                    }
                    out[static_cast<std::size_t>(seg.start + i) * d + h * dh + c] = acc;
                }
            }
            off += static_cast<std::size_t>(L) * L;
        }
    }
}

template <typename T>
void causal_attention_backward(const AttentionShape& shape, std::span<const T> qkv, std::span<const T> probs,
                               std::span<const T> dout, std::span<T> dqkv) {
    const int d = shape.d_model;
    const int dh = shape.head_dim();
    const int stride = 3 * d;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto tasks = head_tasks(shape);
    const int threads = thread_count();
#pragma omp parallel num_threads(threads) if (threads > 1)
    {
        std::vector<T> dp;
#pragma omp for schedule(dynamic, 4)
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            const auto& task = tasks[t];
            const Segment seg = shape.segments[static_cast<std::size_t>(task.segment)];
            const int L = seg.len;
            const T* base = qkv.data() + static_cast<std::size_t>(seg.start) * stride;
            T* dbase = dqkv.data() + static_cast<std::size_t>(seg.start) * stride;
            const int qc = task.head * dh;
            const int kc = d + qc;
            const int vc = 2 * d + qc;
            const T* p = probs.data() + task.prob_offset;
            dp.assign(static_cast<std::size_t>(L), T(0));
            for (int i = 0; i < L; ++i) {
                const T* doi = dout.data() + static_cast<std::size_t>(seg.start + i) * d + qc;
                const T* prow = p + static_cast<std::size_t>(i) * L;
                T dot = 0;
                for (int j = 0; j <= i; ++j) {
                    const T* vj = base + static_cast<std::size_t>(j) * stride + vc;
                    T* dvj = dbase + static_cast<std::size_t>(j) * stride + vc;
                    T s = 0;
                    for (int c = 0; c < dh; ++c) {
                        s += doi[c] * vj[c];
                        dvj[c] += prow[j] * doi[c];
                    }
                    dp[static_cast<std::size_t>(j)] = s;
                    dot += prow[j] * s;
                }
                const T* qi = base + static_cast<std::size_t>(i) * stride + qc;
                T* dqi = dbase + static_cast<std::size_t>(i) * stride + qc;
                for (int j = 0; j <= i; ++j) {
                    const T ds = prow[j] * (dp[static_cast<std::size_t>(j)] - dot) * scale;
                    const T* kj = base + static_cast<std::size_t>(j) * stride + kc;
                    T* dkj = dbase + static_cast<std::size_t>(j) * stride + kc;
                    for (int c = 0; c < dh; ++c) {
                        dqi[c] += ds * kj[c];
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }
    }
}

template <typename T>
void causal_attention_backward_reference(const AttentionShape& shape, std::span<const T> qkv,
                                         std::span<const T> probs, std::span<const T> dout,
                                         std::span<T> dqkv) {
    const int d = shape.d_model;
    const int dh = shape.head_dim();
    const int stride = 3 * d;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::size_t off = 0;
    auto q = [&](int row, int h, int c) { return qkv[static_cast<std::size_t>(row) * stride + h * dh + c]; };
    auto k = [&](int row, int h, int c) { return qkv[static_cast<std::size_t>(row) * stride + d + h * dh + c]; };
    auto v = [&](int row, int h, int c) { return qkv[static_cast<std::size_t>(row) * stride + 2 * d + h * dh + c]; };
    for (const auto& seg : shape.segments) {
        const int L = seg.len;
        for (int h = 0; h < shape.n_heads; ++h) {
            auto P = [&](int i, int j) { return probs[off + static_cast<std::size_t>(i) * L + j]; };
            auto dO = [&](int i, int c) { return dout[static_cast<std::size_t>(seg.start + i) * d + h * dh + c]; };
            // dP = dO V^T, dS = P .* (dP - rowsum(P .* dP))
            std::vector<T> ds(static_cast<std::size_t>(L) * L);
            for (int i = 0; i < L; ++i) {
                std::vector<T> dp(static_cast<std::size_t>(L));
                T dot = 0;
                for (int j = 0; j < L; ++j) {
                    T s = 0;
                    for (int c = 0; c < dh; ++c) s += dO(i, c) * v(seg.start + j, h, c);
                    dp[static_cast<std::size_t>(j)] = s;
                    dot += P(i, j) * s;
                }
                for (int j = 0; j < L; ++j) {
                    ds[static_cast<std::size_t>(i) * L + j] = P(i, j) * (dp[static_cast<std::size_t>(j)] - dot) * scale;
                }
            }
            for (int i = 0; i < L; ++i) {
                for (int c = 0; c < dh; ++c) {
                    T gq = 0, gk = 0, gv = 0;
                    for (int j = 0; j < L; ++j) {
                        gq += ds[static_cast<std::size_t>(i) * L + j] * k(seg.start + j, h, c);
                        gk += ds[static_cast<std::size_t>(j) * L + i] * q(seg.start + j, h, c);
                        gv += P(j, i) * dO(j, c);
                    }
                    const std::size_t row = static_cast<std::size_t>(seg.start + i) * stride;
                    dqkv[row + h * dh + c] += gq;
                    dqkv[row + d + h * dh + c] += gk;
                    dqkv[row + 2 * d + h * dh + c] += gv;
                }
            }
            off += static_cast<std::size_t>(L) * L;
        }
    }
}

#define AXLAB_INSTANTIATE_KERNELS(T)                                                                          \
    template void gemm_nn<T>(std::span<const T>, std::span<const T>, std::span<T>, int, int, int, bool);      \
    template void gemm_nn_reference<T>(std::span<const T>, std::span<const T>, std::span<T>, int, int, int,   \
                                       bool);                                                                 \
    template void gemm_nt<T>(std::span<const T>, std::span<const T>, std::span<T>, int, int, int, bool);      \
    template void gemm_nt_reference<T>(std::span<const T>, std::span<const T>, std::span<T>, int, int, int,   \
                                       bool);                                                                 \
    template void gemm_tn<T>(std::span<const T>, std::span<const T>, std::span<T>, int, int, int, bool);      \
    template void gemm_tn_reference<T>(std::span<const T>, std::span<const T>, std::span<T>, int, int, int,   \
                                       bool);                                                                 \
    template void causal_attention_forward<T>(const AttentionShape&, std::span<const T>, std::span<T>,        \
                                              std::span<T>);                                                  \
    template void causal_attention_forward_reference<T>(const AttentionShape&, std::span<const T>,            \
                                                        std::span<T>, std::span<T>);                          \
    template void causal_attention_backward<T>(const AttentionShape&, std::span<const T>, std::span<const T>, \
                                               std::span<const T>, std::span<T>);                             \
    template void causal_attention_backward_reference<T>(const AttentionShape&, std::span<const T>,           \
                                                         std::span<const T>, std::span<const T>,              \
                                                         std::span<T>);

AXLAB_INSTANTIATE_KERNELS(float)
AXLAB_INSTANTIATE_KERNELS(double)

}  // namespace axlab::kernels
