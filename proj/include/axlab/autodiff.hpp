#pragma once

// Tape-based reverse-mode automatic differentiation.
//
// A Tape owns every value computed during one step. Ops are free functions
// that read their operands' values, push a new node, and (when any operand
// requires a gradient) record a closure that propagates the node's gradient
// to its parents. backward() walks the nodes in reverse insertion order, which
// is a valid reverse topological order because parents always precede children.
//
// One tape per training step; reset() before reuse. Not thread-safe.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "axlab/kernels.hpp"
#include "axlab/tensor.hpp"

namespace axlab::ad {

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr && id_ >= 0; }
    int id() const { return id_; }
    Tape<T>* tape() const { return tape_; }

    const Tensor<T>& value() const;
    const Tensor<T>& grad() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    Tape<T>* tape_ = nullptr;
    int id_ = -1;
};

template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Trainable leaf.
    Var<T> leaf(Tensor<T> value);
    /// Leaf that never receives a gradient.
    Var<T> constant(Tensor<T> value);
    /// Records an op result. `fn` is dropped when no parent requires grad.
    Var<T> record(Tensor<T> value, std::span<const Var<T>> parents, BackwardFn fn);
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
        return record(std::move(value), std::span<const Var<T>>(parents.begin(), parents.size()), std::move(fn));
    }

    const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }
    /// Gradient of a node after backward(); zeros if it was unreachable.
    const Tensor<T>& grad(int id);
    /// Accumulator used inside backward closures; allocated lazily as zeros.
    Tensor<T>& grad_accum(int id);

    /// Seeds d(loss)/d(loss) = 1 and propagates. Loss must be a single element.
    void backward(Var<T> loss);
    void reset();

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
    return tape_->grad(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_->requires_grad(id_);
}

// ---- elementwise -----------------------------------------------------------

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
/// Positions where mask is nonzero are replaced by `fill`; they get no gradient.
template <typename T> Var<T> masked_fill(Var<T> a, std::span<const std::uint8_t> mask, T fill);

// ---- reductions ------------------------------------------------------------

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

// ---- shape -----------------------------------------------------------------

template <typename T> Var<T> reshape(Var<T> a, Shape shape);
/// 2-D transpose.
template <typename T> Var<T> transpose(Var<T> a);
/// Concatenate along `axis`; all other dimensions must agree.
template <typename T> Var<T> concat(std::span<const Var<T>> parts, int axis);
/// Stack equal-length vectors into a [n x d] matrix.
template <typename T> Var<T> stack_rows(std::span<const Var<T>> rows);
/// Rows [start, end) of a matrix.
template <typename T> Var<T> slice_rows(Var<T> a, int start, int end);

// ---- linear algebra --------------------------------------------------------

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
/// x[n x d] + bias[d] broadcast over rows.
template <typename T> Var<T> add_bias(Var<T> x, Var<T> bias);
/// Embedding lookup; backward scatter-adds into the table.
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const int> ids);

// ---- normalisation / probability ----------------------------------------

template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
template <typename T> Var<T> softmax(Var<T> x, int axis = -1);
/// Mean over rows of -log softmax(logits)[i, target_i].
template <typename T> Var<T> cross_entropy(Var<T> logits, std::span<const int> targets);
/// sum_i weight_i * (-log softmax(logits)[i, target_i]); rows with weight 0 are skipped.
template <typename T>
Var<T> weighted_cross_entropy(Var<T> logits, std::span<const int> targets, std::span<const T> weights);

// ---- representation ops ----------------------------------------------------

/// Mean of rows [start, end) of h[n x d] -> [d].
template <typename T> Var<T> mean_pool(Var<T> h, int start, int end);
inline constexpr double kCosineEps = 1e-12;
/// u.v / (|u||v|) -> scalar [1]. Throws DegenerateVectorError if a norm <= 1e-12.
template <typename T> Var<T> cosine_sim(Var<T> u, Var<T> v);
/// Each row divided by its L2 norm.
template <typename T> Var<T> normalize_rows(Var<T> x);

// ---- attention -------------------------------------------------------------

/// Multi-head causal self-attention over packed segments (see kernels.hpp).
template <typename T>
Var<T> causal_attention(Var<T> qkv, std::span<const kernels::Segment> segments, int n_heads);

}  // namespace axlab::ad
