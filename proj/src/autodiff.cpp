#include "axlab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "axlab/errors.hpp"

namespace axlab::ad {

// ---- Tape --------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> parents, BackwardFn fn) {
    bool needs = false;
    for (const auto& p : parents) {
        if (p.tape() != this) throw Error("operand recorded on a different tape");
        needs = needs || requires_grad(p.id());
    }
    nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, needs});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::grad(int id) {
    return grad_accum(id);
}

template <typename T>
Tensor<T>& Tape<T>::grad_accum(int id) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad.empty()) node.grad = Tensor<T>::zeros(node.value.shape());
    return node.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
    if (loss.tape() != this) throw Error("loss belongs to a different tape");
    if (consumed_) throw Error("tape already consumed; reset() before another backward pass");
    if (value(loss.id()).numel() != 1) {
        throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(value(loss.id()).shape()));
    }
    grad_accum(loss.id())[0] = T(1);
    for (int id = loss.id(); id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (node.backward && !node.grad.empty()) node.backward(*this, id);
    }
    consumed_ = true;
}

template <typename T>
void Tape<T>::reset() {
    nodes_.clear();
    consumed_ = false;
}

namespace {

template <typename T>
Tape<T>& tape_of(Var<T> a) {
    if (!a.valid()) throw Error("operation on an invalid Var");
    return *a.tape();
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

template <typename T>
void require_matrix(const char* op, const Tensor<T>& a) {
    if (a.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
    }
}

template <typename T>
void accumulate(Tensor<T>& dst, std::span<const T> src, T factor = T(1)) {
    auto d = dst.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * src[i];
}

template <typename T>
Var<T> unary(Var<T> a, T (*f)(T), T (*df)(T)) {
    auto& tape = tape_of(a);
    Tensor<T> out(a.value().shape());
    const auto in = a.value().data();
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    const int ia = a.id();
    return tape.record(std::move(out), {a}, [ia, df](Tape<T>& t, int self) {
        if (!t.requires_grad(ia)) return;
        const auto g = t.grad_accum(self).data();
        const auto x = t.value(ia).data();
        auto ga = t.grad_accum(ia).data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i]);
    });
}

template <typename T>
T gelu_f(T x) {
    const T c = std::sqrt(T(2) / std::numbers::pi_v<T>);
    return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_df(T x) {
    const T c = std::sqrt(T(2) / std::numbers::pi_v<T>);
    const T u = c * (x + T(0.044715) * x * x * x);
    const T th = std::tanh(u);
    const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
T relu_f(T x) {
    return x > T(0) ? x : T(0);
}

template <typename T>
T relu_df(T x) {
    return x > T(0) ? T(1) : T(0);
}

// Splits a shape around `axis` into (outer, axis_len, inner).
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t len = 1;
    std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    AxisSplit s;
    for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
        const auto d = static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
        if (i < axis) s.outer *= d;
        else if (i == axis) s.len = d;
        else s.inner *= d;
    }
    return s;
}

int normalize_axis(int axis, int rank, const char* op) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                             std::to_string(rank));
    }
    return a;
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    auto& tape = tape_of(a);
    require_same_shape("add", a.value(), b.value());
    Tensor<T> out = a.value();
    accumulate(out, b.value().data());
    const int ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        if (t.requires_grad(ia)) accumulate<T>(t.grad_accum(ia), g);
        if (t.requires_grad(ib)) accumulate<T>(t.grad_accum(ib), g);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    auto& tape = tape_of(a);
    require_same_shape("sub", a.value(), b.value());
    Tensor<T> out = a.value();
    accumulate(out, b.value().data(), T(-1));
    const int ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        if (t.requires_grad(ia)) accumulate<T>(t.grad_accum(ia), g);
        if (t.requires_grad(ib)) accumulate<T>(t.grad_accum(ib), g, T(-1));
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    auto& tape = tape_of(a);
    require_same_shape("mul", a.value(), b.value());
    Tensor<T> out(a.value().shape());
    const auto x = a.value().data();
    const auto y = b.value().data();
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    const int ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        const auto x = t.value(ia).data();
        const auto y = t.value(ib).data();
        if (t.requires_grad(ia)) {
            auto ga = t.grad_accum(ia).data();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
        }
        if (t.requires_grad(ib)) {
            auto gb = t.grad_accum(ib).data();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    auto& tape = tape_of(a);
    Tensor<T> out = a.value();
    for (auto& v : out.storage()) v *= factor;
    const int ia = a.id();
    return tape.record(std::move(out), {a}, [ia, factor](Tape<T>& t, int self) {
        accumulate<T>(t.grad_accum(ia), t.grad_accum(self).data(), factor);
    });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    return unary<T>(a, &gelu_f<T>, &gelu_df<T>);
}

template <typename T>
Var<T> relu(Var<T> a) {
    return unary<T>(a, &relu_f<T>, &relu_df<T>);
}

template <typename T>
Var<T> masked_fill(Var<T> a, std::span<const std::uint8_t> mask, T fill) {
    auto& tape = tape_of(a);
    if (mask.size() != a.value().numel()) {
        throw DimensionError("masked_fill: mask has " + std::to_string(mask.size()) + " entries for shape " +
                             shape_str(a.value().shape()));
    }
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) out[i] = fill;
    }
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    const int ia = a.id();
    return tape.record(std::move(out), {a}, [ia, m = std::move(m)](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        auto ga = t.grad_accum(ia).data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!m[i]) ga[i] += g[i];
        }
    });
}

// ---- reductions --------------------------------------------------------------

template <typename T>
Var<T> sum(Var<T> a) {
    auto& tape = tape_of(a);
    T s = 0;
    for (T v : a.value().data()) s += v;
    const int ia = a.id();
    return tape.record(Tensor<T>::scalar(s), {a}, [ia](Tape<T>& t, int self) {
        const T g = t.grad_accum(self)[0];
        for (auto& v : t.grad_accum(ia).storage()) v += g;
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

// ---- shape -------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    auto& tape = tape_of(a);
    Tensor<T> out = a.value().reshaped(std::move(shape));
    const int ia = a.id();
    return tape.record(std::move(out), {a}, [ia](Tape<T>& t, int self) {
        accumulate<T>(t.grad_accum(ia), t.grad_accum(self).data());
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    auto& tape = tape_of(a);
    require_matrix("transpose", a.value());
    const int r = a.value().dim(0), c = a.value().dim(1);
    Tensor<T> out(Shape{c, r});
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
    }
    const int ia = a.id();
    return tape.record(std::move(out), {a}, [ia, r, c](Tape<T>& t, int self) {
        const auto& g = t.grad_accum(self);
        auto& ga = t.grad_accum(ia);
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < c; ++j) ga.at(i, j) += g.at(j, i);
        }
    });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no operands");
    auto& tape = tape_of(parts[0]);
    const Shape& first = parts[0].value().shape();
    const int rank = static_cast<int>(first.size());
    const int ax = normalize_axis(axis, rank, "concat");
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(ax)] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.value().shape();
        bool ok = static_cast<int>(s.size()) == rank;
        for (int i = 0; ok && i < rank; ++i) {
            if (i != ax && s[static_cast<std::size_t>(i)] != first[static_cast<std::size_t>(i)]) ok = false;
        }
        if (!ok) {
            throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first) +
                                 " along axis " + std::to_string(ax));
        }
        out_shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
    }
    Tensor<T> out(out_shape);
    const AxisSplit os = split_axis(out_shape, ax);
    std::vector<int> ids;
    std::vector<std::size_t> chunk;  // contiguous elements per outer index
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        const std::size_t ck = static_cast<std::size_t>(p.value().dim(ax)) * os.inner;
        const auto src = p.value().data();
        for (std::size_t o = 0; o < os.outer; ++o) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * ck), ck,
                        out.storage().begin() + static_cast<std::ptrdiff_t>(o * os.len * os.inner + offset));
        }
        ids.push_back(p.id());
        chunk.push_back(ck);
        offsets.push_back(offset);
        offset += ck;
    }
    const std::size_t row = os.len * os.inner;
    const std::size_t outer = os.outer;
    return tape.record(std::move(out), parts,
                       [ids = std::move(ids), chunk = std::move(chunk), offsets = std::move(offsets), row,
                        outer](Tape<T>& t, int self) {
                           const auto g = t.grad_accum(self).data();
                           for (std::size_t p = 0; p < ids.size(); ++p) {
                               if (!t.requires_grad(ids[p])) continue;
                               auto gp = t.grad_accum(ids[p]).data();
                               for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t i = 0; i < chunk[p]; ++i) {
                                       gp[o * chunk[p] + i] += g[o * row + offsets[p] + i];
                                   }
                               }
                           }
                       });
}

template <typename T>
Var<T> stack_rows(std::span<const Var<T>> rows) {
    if (rows.empty()) throw DimensionError("stack_rows: no operands");
    auto& tape = tape_of(rows[0]);
    const std::size_t d = rows[0].value().numel();
    for (const auto& r : rows) {
        if (r.value().rank() != 1 || r.value().numel() != d) {
            throw DimensionError("stack_rows: expected vectors of length " + std::to_string(d) + ", got " +
                                 shape_str(r.value().shape()));
        }
    }
    Tensor<T> out(Shape{static_cast<int>(rows.size()), static_cast<int>(d)});
    std::vector<int> ids;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(rows[i].value().data().begin(), d, out.storage().begin() + static_cast<std::ptrdiff_t>(i * d));
        ids.push_back(rows[i].id());
    }
    return tape.record(std::move(out), rows, [ids = std::move(ids), d](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!t.requires_grad(ids[i])) continue;
            accumulate<T>(t.grad_accum(ids[i]), g.subspan(i * d, d));
        }
    });
}

template <typename T>
Var<T> slice_rows(Var<T> a, int start, int end) {
    auto& tape = tape_of(a);
    require_matrix("slice_rows", a.value());
    const int n = a.value().dim(0), d = a.value().dim(1);
    if (start < 0 || end > n || start >= end) {
        throw InvalidSpanError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(end) +
                               ") invalid for " + std::to_string(n) + " rows");
    }
    const auto src = a.value().data().subspan(static_cast<std::size_t>(start) * d,
                                              static_cast<std::size_t>(end - start) * d);
    Tensor<T> out(Shape{end - start, d}, std::vector<T>(src.begin(), src.end()));
    const int ia = a.id();
    return tape.record(std::move(out), {a}, [ia, start, d](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        auto ga = t.grad_accum(ia).data().subspan(static_cast<std::size_t>(start) * d, g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    auto& tape = tape_of(a);
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                             shape_str(bv.shape()));
    }
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out(Shape{m, n});
    kernels::gemm_nn<T>(av.data(), bv.data(), out.data(), m, k, n, false);
    const int ia = a.id(), ib = b.id();
    return tape.record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        if (t.requires_grad(ia)) {
            kernels::gemm_nt<T>(g, t.value(ib).data(), t.grad_accum(ia).data(), m, n, k, true);
        }
        if (t.requires_grad(ib)) {
            kernels::gemm_tn<T>(t.value(ia).data(), g, t.grad_accum(ib).data(), m, k, n, true);
        }
    });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
    auto& tape = tape_of(x);
    require_matrix("add_bias", x.value());
    const int n = x.value().dim(0), d = x.value().dim(1);
    if (bias.value().numel() != static_cast<std::size_t>(d)) {
        throw DimensionError("add_bias: bias " + shape_str(bias.value().shape()) + " does not match " +
                             shape_str(x.value().shape()));
    }
    Tensor<T> out = x.value();
    const auto b = bias.value().data();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] += b[static_cast<std::size_t>(j)];
    }
    const int ix = x.id(), ib = bias.id();
    return tape.record(std::move(out), {x, bias}, [ix, ib, n, d](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        if (t.requires_grad(ix)) accumulate<T>(t.grad_accum(ix), g);
        if (t.requires_grad(ib)) {
            auto gb = t.grad_accum(ib).data();
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < d; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(i) * d + j];
            }
        }
    });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
    auto& tape = tape_of(table);
    require_matrix("gather_rows", table.value());
    const int v = table.value().dim(0), d = table.value().dim(1);
    if (ids.empty()) throw DimensionError("gather_rows: empty index list");
    Tensor<T> out(Shape{static_cast<int>(ids.size()), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw IndexError("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(v) + " rows");
        }
        std::copy_n(table.value().data().begin() + static_cast<std::ptrdiff_t>(ids[i]) * d, d,
                    out.storage().begin() + static_cast<std::ptrdiff_t>(i) * d);
    }
    std::vector<int> idx(ids.begin(), ids.end());
    const int it = table.id();
    return tape.record(std::move(out), {table}, [it, idx = std::move(idx), d](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        auto gt = t.grad_accum(it).data();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (int j = 0; j < d; ++j) {
                gt[static_cast<std::size_t>(idx[i]) * d + j] += g[i * d + static_cast<std::size_t>(j)];
            }
        }
    });
}

// ---- normalisation / probability ----------------------------------------------

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
    auto& tape = tape_of(x);
    require_matrix("layer_norm", x.value());
    const int n = x.value().dim(0), d = x.value().dim(1);
    if (gain.value().numel() != static_cast<std::size_t>(d) || bias.value().numel() != static_cast<std::size_t>(d)) {
        throw DimensionError("layer_norm: gain/bias do not match feature width " + std::to_string(d));
    }
    Tensor<T> out(Shape{n, d});
    std::vector<T> xhat(static_cast<std::size_t>(n) * d);
    std::vector<T> rstd(static_cast<std::size_t>(n));
    const auto xv = x.value().data();
    const auto gv = gain.value().data();
    const auto bv = bias.value().data();
    for (int i = 0; i < n; ++i) {
        const auto row = xv.subspan(static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d));
        T mu = 0;
        for (T v : row) mu += v;
        mu /= static_cast<T>(d);
        T var = 0;
        for (T v : row) var += (v - mu) * (v - mu);
        var /= static_cast<T>(d);
        const T r = T(1) / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(i)] = r;
        for (int j = 0; j < d; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * d + j;
            xhat[k] = (row[static_cast<std::size_t>(j)] - mu) * r;
            out[k] = xhat[k] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    const int ix = x.id(), ig = gain.id(), ib = bias.id();
    return tape.record(
        std::move(out), {x, gain, bias},
        [ix, ig, ib, n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, int self) {
            const auto g = t.grad_accum(self).data();
            const auto gv = t.value(ig).data();
            if (t.requires_grad(ig)) {
                auto gg = t.grad_accum(ig).data();
                for (std::size_t k = 0; k < g.size(); ++k) gg[k % static_cast<std::size_t>(d)] += g[k] * xhat[k];
            }
            if (t.requires_grad(ib)) {
                auto gb = t.grad_accum(ib).data();
                for (std::size_t k = 0; k < g.size(); ++k) gb[k % static_cast<std::size_t>(d)] += g[k];
            }
            if (t.requires_grad(ix)) {
                auto gx = t.grad_accum(ix).data();
                for (int i = 0; i < n; ++i) {
                    const std::size_t base = static_cast<std::size_t>(i) * d;
                    T m1 = 0, m2 = 0;
                    for (int j = 0; j < d; ++j) {
                        const T dxh = g[base + j] * gv[static_cast<std::size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * xhat[base + j];
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    const T r = rstd[static_cast<std::size_t>(i)];
                    for (int j = 0; j < d; ++j) {
                        const T dxh = g[base + j] * gv[static_cast<std::size_t>(j)];
                        gx[base + j] += r * (dxh - m1 - xhat[base + j] * m2);
                    }
                }
            }
        });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
    auto& tape = tape_of(x);
    const int ax = normalize_axis(axis, x.value().rank(), "softmax");
    const AxisSplit s = split_axis(x.value().shape(), ax);
    Tensor<T> out(x.value().shape());
    const auto in = x.value().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t r = 0; r < s.inner; ++r) {
            const std::size_t base = o * s.len * s.inner + r;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < s.len; ++k) mx = std::max(mx, in[base + k * s.inner]);
            T z = 0;
            for (std::size_t k = 0; k < s.len; ++k) {
                const T e = std::exp(in[base + k * s.inner] - mx);
                out[base + k * s.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < s.len; ++k) out[base + k * s.inner] /= z;
        }
    }
    const int ix = x.id();
    return tape.record(std::move(out), {x}, [ix, s](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        const auto y = t.value(self).data();
        auto gx = t.grad_accum(ix).data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t r = 0; r < s.inner; ++r) {
                const std::size_t base = o * s.len * s.inner + r;
                T dot = 0;
                for (std::size_t k = 0; k < s.len; ++k) dot += g[base + k * s.inner] * y[base + k * s.inner];
                for (std::size_t k = 0; k < s.len; ++k) {
                    const std::size_t i = base + k * s.inner;
                    gx[i] += y[i] * (g[i] - dot);
                }
            }
        }
    });
}

template <typename T>
Var<T> weighted_cross_entropy(Var<T> logits, std::span<const int> targets, std::span<const T> weights) {
    auto& tape = tape_of(logits);
    const auto& lv = logits.value();
    if (lv.rank() != 1 && lv.rank() != 2) {
        throw DimensionError("cross_entropy: logits must be [n x V], got " + shape_str(lv.shape()));
    }
    const int n = lv.rows(), V = lv.cols();
    if (static_cast<int>(targets.size()) != n || static_cast<int>(weights.size()) != n) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                             std::to_string(weights.size()) + " weights for " + std::to_string(n) + " rows");
    }
    T total = 0;
    for (int i = 0; i < n; ++i) {
        if (targets[static_cast<std::size_t>(i)] < 0 || targets[static_cast<std::size_t>(i)] >= V) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[static_cast<std::size_t>(i)]) +
                             " out of range for " + std::to_string(V) + " classes");
        }
        const T w = weights[static_cast<std::size_t>(i)];
        if (w == T(0)) continue;
        const auto row = lv.data().subspan(static_cast<std::size_t>(i) * V, static_cast<std::size_t>(V));
        const T mx = *std::max_element(row.begin(), row.end());
        T z = 0;
        for (T v : row) z += std::exp(v - mx);
        total += w * (mx + std::log(z) - row[static_cast<std::size_t>(targets[static_cast<std::size_t>(i)])]);
    }
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<T> wt(weights.begin(), weights.end());
    const int il = logits.id();
    return tape.record(Tensor<T>::scalar(total), {logits},
                       [il, n, V, tg = std::move(tg), wt = std::move(wt)](Tape<T>& t, int self) {
                           const T g = t.grad_accum(self)[0];
                           const auto lv = t.value(il).data();
                           auto gl = t.grad_accum(il).data();
                           for (int i = 0; i < n; ++i) {
                               const T w = wt[static_cast<std::size_t>(i)];
                               if (w == T(0)) continue;
                               const std::size_t base = static_cast<std::size_t>(i) * V;
                               T mx = lv[base];
                               for (int j = 1; j < V; ++j) mx = std::max(mx, lv[base + j]);
                               T z = 0;
                               for (int j = 0; j < V; ++j) z += std::exp(lv[base + j] - mx);
                               const T f = g * w / z;
                               for (int j = 0; j < V; ++j) gl[base + j] += f * std::exp(lv[base + j] - mx);
                               gl[base + static_cast<std::size_t>(tg[static_cast<std::size_t>(i)])] -= g * w;
                           }
                       });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets) {
    const int n = logits.value().rank() == 1 ? 1 : logits.value().dim(0);
    if (n == 0) throw DimensionError("cross_entropy: no rows");
    std::vector<T> w(static_cast<std::size_t>(n), T(1) / static_cast<T>(n));
    return weighted_cross_entropy<T>(logits, targets, w);
}

// ---- representation ops --------------------------------------------------------

template <typename T>
Var<T> mean_pool(Var<T> h, int start, int end) {
    auto& tape = tape_of(h);
    require_matrix("mean_pool", h.value());
    const int n = h.value().dim(0), d = h.value().dim(1);
    if (start < 0 || end > n || start >= end) {
        throw InvalidSpanError("mean_pool: span [" + std::to_string(start) + ", " + std::to_string(end) +
                               ") invalid for sequence of length " + std::to_string(n));
    }
    Tensor<T> out(Shape{d});
    const auto hv = h.value().data();
    for (int i = start; i < end; ++i) {
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += hv[static_cast<std::size_t>(i) * d + j];
    }
    const T inv = T(1) / static_cast<T>(end - start);
    for (auto& v : out.storage()) v *= inv;
    const int ih = h.id();
    return tape.record(std::move(out), {h}, [ih, start, end, d, inv](Tape<T>& t, int self) {
        const auto g = t.grad_accum(self).data();
        auto gh = t.grad_accum(ih).data();
        for (int i = start; i < end; ++i) {
            for (int j = 0; j < d; ++j) gh[static_cast<std::size_t>(i) * d + j] += g[static_cast<std::size_t>(j)] * inv;
        }
    });
}

template <typename T>
Var<T> cosine_sim(Var<T> u, Var<T> v) {
    auto& tape = tape_of(u);
    if (u.value().rank() != 1 || u.value().shape() != v.value().shape()) {
        throw DimensionError("cosine_sim: expected equal-length vectors, got " + shape_str(u.value().shape()) +
                             " and " + shape_str(v.value().shape()));
    }
    const auto a = u.value().data();
    const auto b = v.value().data();
    T dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (!(na > T(kCosineEps)) || !(nb > T(kCosineEps))) {
        throw DegenerateVectorError("cosine_sim: vector norm below 1e-12");
    }
    const T cs = dot / (na * nb);
    const int iu = u.id(), iv = v.id();
    return tape.record(Tensor<T>::scalar(cs), {u, v}, [iu, iv, na, nb, cs](Tape<T>& t, int self) {
        const T g = t.grad_accum(self)[0];
        const auto a = t.value(iu).data();
        const auto b = t.value(iv).data();
        if (t.requires_grad(iu)) {
            auto gu = t.grad_accum(iu).data();
            for (std::size_t i = 0; i < a.size(); ++i) gu[i] += g * (b[i] / (na * nb) - cs * a[i] / (na * na));
        }
        if (t.requires_grad(iv)) {
            auto gv = t.grad_accum(iv).data();
            for (std::size_t i = 0; i < a.size(); ++i) gv[i] += g * (a[i] / (na * nb) - cs * b[i] / (nb * nb));
        }
    });
}

template <typename T>
Var<T> normalize_rows(Var<T> x) {
    auto& tape = tape_of(x);
    require_matrix("normalize_rows", x.value());
    const int n = x.value().dim(0), d = x.value().dim(1);
    Tensor<T> out = x.value();
    std::vector<T> norms(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        T s = 0;
        for (int j = 0; j < d; ++j) s += out.at(i, j) * out.at(i, j);
        s = std::sqrt(s);
        if (!(s > T(kCosineEps))) {
            throw DegenerateVectorError("normalize_rows: row " + std::to_string(i) + " has norm below 1e-12");
        }
        norms[static_cast<std::size_t>(i)] = s;
        for (int j = 0; j < d; ++j) out.at(i, j) /= s;
    }
    const int ix = x.id();
    return tape.record(std::move(out), {x}, [ix, n, d, norms = std::move(norms)](Tape<T>& t, int self) {
        const auto& g = t.grad_accum(self);
        const auto& y = t.value(self);
        auto& gx = t.grad_accum(ix);
        for (int i = 0; i < n; ++i) {
            T dot = 0;
            for (int j = 0; j < d; ++j) dot += g.at(i, j) * y.at(i, j);
            const T inv = T(1) / norms[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j) gx.at(i, j) += inv * (g.at(i, j) - y.at(i, j) * dot);
        }
    });
}

// ---- attention -------------------------------------------------------------------

template <typename T>
Var<T> causal_attention(Var<T> qkv, std::span<const kernels::Segment> segments, int n_heads) {
    auto& tape = tape_of(qkv);
    require_matrix("causal_attention", qkv.value());
    const int rows = qkv.value().dim(0);
    const int width = qkv.value().dim(1);
    if (width % 3 != 0 || n_heads <= 0 || (width / 3) % n_heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(width) + " not 3 x (multiple of " +
                             std::to_string(n_heads) + " heads)");
    }
    for (const auto& s : segments) {
        if (s.start < 0 || s.len <= 0 || s.start + s.len > rows) {
            throw InvalidSpanError("causal_attention: segment outside " + std::to_string(rows) + " rows");
        }
    }
    std::vector<kernels::Segment> segs(segments.begin(), segments.end());
    const int d = width / 3;
    kernels::AttentionShape shape{rows, d, n_heads, segs};
    Tensor<T> out(Shape{rows, d});
    std::vector<T> probs(kernels::attention_prob_size(shape));
    kernels::causal_attention_forward<T>(shape, qkv.value().data(), out.data(), probs);
    const int iq = qkv.id();
    return tape.record(std::move(out), {qkv},
                       [iq, rows, d, n_heads, segs = std::move(segs), probs = std::move(probs)](Tape<T>& t, int self) {
                           kernels::AttentionShape shape{rows, d, n_heads, segs};
                           kernels::causal_attention_backward<T>(shape, t.value(iq).data(), probs,
                                                                 t.grad_accum(self).data(), t.grad_accum(iq).data());
                       });
}

// ---- instantiation -------------------------------------------------------------

#define AXLAB_INSTANTIATE_AD(T)                                                                          \
    template class Tape<T>;                                                                              \
    template Var<T> add<T>(Var<T>, Var<T>);                                                              \
    template Var<T> sub<T>(Var<T>, Var<T>);                                                              \
    template Var<T> mul<T>(Var<T>, Var<T>);                                                              \
    template Var<T> scale<T>(Var<T>, T);                                                                 \
    template Var<T> gelu<T>(Var<T>);                                                                     \
    template Var<T> relu<T>(Var<T>);                                                                     \
    template Var<T> masked_fill<T>(Var<T>, std::span<const std::uint8_t>, T);                            \
    template Var<T> sum<T>(Var<T>);                                                                      \
    template Var<T> mean<T>(Var<T>);                                                                     \
    template Var<T> reshape<T>(Var<T>, Shape);                                                           \
    template Var<T> transpose<T>(Var<T>);                                                                \
    template Var<T> concat<T>(std::span<const Var<T>>, int);                                             \
    template Var<T> stack_rows<T>(std::span<const Var<T>>);                                              \
    template Var<T> slice_rows<T>(Var<T>, int, int);                                                     \
    template Var<T> matmul<T>(Var<T>, Var<T>);                                                           \
    template Var<T> add_bias<T>(Var<T>, Var<T>);                                                         \
    template Var<T> gather_rows<T>(Var<T>, std::span<const int>);                                        \
    template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, T);                                            \
    template Var<T> softmax<T>(Var<T>, int);                                                             \
    template Var<T> cross_entropy<T>(Var<T>, std::span<const int>);                                      \
    template Var<T> weighted_cross_entropy<T>(Var<T>, std::span<const int>, std::span<const T>);         \
    template Var<T> mean_pool<T>(Var<T>, int, int);                                                      \
    template Var<T> cosine_sim<T>(Var<T>, Var<T>);                                                       \
    template Var<T> normalize_rows<T>(Var<T>);                                                           \
    template Var<T> causal_attention<T>(Var<T>, std::span<const kernels::Segment>, int);

AXLAB_INSTANTIATE_AD(float)
AXLAB_INSTANTIATE_AD(double)

}  // namespace axlab::ad
