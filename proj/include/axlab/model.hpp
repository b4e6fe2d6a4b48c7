#pragma once

// Tiny decoder-only transformer: learned absolute positions, pre-norm
// residual blocks (causal multi-head attention + GELU MLP), final layer norm
// and an untied unembedding. Hidden state l is the residual stream after
// block l; l = 0 is the embedding sum.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "axlab/autodiff.hpp"
#include "axlab/kernels.hpp"
#include "axlab/tensor.hpp"

namespace axlab::model {

struct ModelConfig {
    int vocab_size = 0;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 64;
    int align_layer = 2;

    /// Default desk-scale shape for a given vocabulary; align_layer = n_layers / 2.
    static ModelConfig desk_default(int vocab_size);
    void validate() const;
    /// Stable textual form used for hashing and checkpoint headers.
    std::string canonical() const;
    std::uint64_t hash() const;
    bool operator==(const ModelConfig&) const = default;
};

template <typename X>
struct LayerWeights {
    X ln1_gain, ln1_bias;
    X w_qkv, b_qkv;  // [d x 3d], [3d]
    X w_out, b_out;  // [d x d], [d]
    X ln2_gain, ln2_bias;
    X w_ff1, b_ff1;  // [d x d_ff], [d_ff]
    X w_ff2, b_ff2;  // [d_ff x d], [d]

    template <typename F>
    void visit(const std::string& prefix, F&& f) { visit_impl(*this, prefix, f); }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const { visit_impl(*this, prefix, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, const std::string& prefix, F& f) {
        f(prefix + "ln1.gain", self.ln1_gain);
        f(prefix + "ln1.bias", self.ln1_bias);
        f(prefix + "attn.w_qkv", self.w_qkv);
        f(prefix + "attn.b_qkv", self.b_qkv);
        f(prefix + "attn.w_out", self.w_out);
        f(prefix + "attn.b_out", self.b_out);
        f(prefix + "ln2.gain", self.ln2_gain);
        f(prefix + "ln2.bias", self.ln2_bias);
        f(prefix + "mlp.w_ff1", self.w_ff1);
        f(prefix + "mlp.b_ff1", self.b_ff1);
        f(prefix + "mlp.w_ff2", self.w_ff2);
        f(prefix + "mlp.b_ff2", self.b_ff2);
    }
};

/// Parameter container generic over the slot type: Tensor<T> for stored
/// weights, ad::Var<T> for weights bound to a tape. visit() fixes the
/// canonical parameter order used by the optimizer and checkpoints.
template <typename X>
struct ModelWeights {
    X tok_emb;  // [vocab x d]
    X pos_emb;  // [max_seq x d]
    std::vector<LayerWeights<X>> layers;
    X lnf_gain, lnf_bias;
    X unembed;  // [d x vocab]

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f(std::string("tok_emb"), self.tok_emb);
        f(std::string("pos_emb"), self.pos_emb);
        for (std::size_t i = 0; i < self.layers.size(); ++i) {
            self.layers[i].visit("layer" + std::to_string(i) + ".", f);
        }
        f(std::string("lnf.gain"), self.lnf_gain);
        f(std::string("lnf.bias"), self.lnf_bias);
        f(std::string("unembed"), self.unembed);
    }
};

template <typename T>
using ModelParams = ModelWeights<Tensor<T>>;
template <typename T>
using ModelVars = ModelWeights<ad::Var<T>>;

/// Scaled normal init: std 0.02, residual output projections scaled by
/// 1/sqrt(2 n_layers), zero biases, unit layer-norm gains.
ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed);

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& params);

/// Shape check against the config; also rejects non-finite values.
template <typename T>
void check_params(const ModelParams<T>& params, const ModelConfig& config);

/// Registers parameters on a tape, as trainable leaves or constants.
template <typename T>
ModelVars<T> bind(ad::Tape<T>& tape, const ModelParams<T>& params, bool trainable);

/// Gradients of bound parameters after backward(), in ModelParams layout.
template <typename T>
ModelParams<T> collect_grads(const ModelVars<T>& vars);

/// Several sequences packed row-wise; attention never crosses segments.
struct PackedBatch {
    std::vector<int> tokens;
    std::vector<int> positions;
    std::vector<kernels::Segment> segments;

    static PackedBatch pack(std::span<const std::vector<int>> sequences);
    int rows() const { return static_cast<int>(tokens.size()); }
};

template <typename T>
struct BatchTrace {
    ad::Var<T> logits;                // [rows x vocab]
    std::vector<ad::Var<T>> hidden;   // n_layers + 1 entries of [rows x d]
};

/// Validates every sequence against the config, then runs the packed forward.
/// Logits are computed for `logit_rows` only (in that order), or for every
/// row when it is empty.
template <typename T>
BatchTrace<T> forward_batch(const ModelVars<T>& vars, const ModelConfig& config,
                            const PackedBatch& batch, std::span<const int> logit_rows = {});

/// Final layer norm + unembedding applied to arbitrary residual-stream rows.
template <typename T>
ad::Var<T> unembed_rows(const ModelVars<T>& vars, ad::Var<T> hidden);

/// Gradient-free single-sequence result.
template <typename T>
struct ForwardTrace {
    Tensor<T> logits;                 // [seq x vocab]
    std::vector<Tensor<T>> hidden;    // n_layers + 1 entries of [seq x d]
};

template <typename T>
ForwardTrace<T> forward(const ModelParams<T>& params, const ModelConfig& config, std::span<const int> tokens);

/// hidden[layer]; throws IndexError outside [0, n_layers].
template <typename T>
const Tensor<T>& hidden_at(const ForwardTrace<T>& trace, int layer);

/// Greedy decoding: argmax with ties toward the lowest id, stops after
/// emitting `eos`, after max_new tokens, or at max_seq_len. Returns the prompt
/// followed by the generated tokens.
std::vector<int> generate(const ModelParams<float>& params, const ModelConfig& config,
                          std::span<const int> prompt, int max_new, int eos);

/// Same as generate() for many prompts at once, packed into shared forward passes.
std::vector<std::vector<int>> generate_batch(const ModelParams<float>& params, const ModelConfig& config,
                                             std::span<const std::vector<int>> prompts, int max_new, int eos);

/// Index of the maximum; first index wins ties.
template <typename T>
int argmax(std::span<const T> values);

}  // namespace axlab::model
