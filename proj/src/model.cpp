#include "axlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "axlab/errors.hpp"
#include "axlab/rng.hpp"

namespace axlab::model {

ModelConfig ModelConfig::desk_default(int vocab_size) {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.align_layer = c.n_layers / 2;
    return c;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size <= 0) fail("vocab_size must be positive");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0) {
        fail("dimensions must be positive");
    }
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (align_layer < 1 || align_layer > n_layers) fail("align_layer must lie in [1, n_layers]");
}

std::string ModelConfig::canonical() const {
    std::ostringstream os;
    os << "vocab_size=" << vocab_size << ";d_model=" << d_model << ";n_layers=" << n_layers
       << ";n_heads=" << n_heads << ";d_ff=" << d_ff << ";max_seq_len=" << max_seq_len
       << ";align_layer=" << align_layer;
    return os.str();
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(canonical()); }

namespace {

Tensor<float> normal_tensor(Shape shape, double std, Rng& rng) {
    Tensor<float> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<float>(rng.normal() * std);
    return t;
}

}  // namespace

ModelParams<float> init_params(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    const int d = config.d_model;
    const double std = 0.02;
    const double resid_std = std / std::sqrt(2.0 * config.n_layers);
    Rng rng(seed);
    ModelParams<float> p;
    p.tok_emb = normal_tensor({config.vocab_size, d}, std, rng);
    p.pos_emb = normal_tensor({config.max_seq_len, d}, std, rng);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights<Tensor<float>> L;
        L.ln1_gain = Tensor<float>({d}, 1.0f);
        L.ln1_bias = Tensor<float>::zeros({d});
        L.w_qkv = normal_tensor({d, 3 * d}, std, rng);
        L.b_qkv = Tensor<float>::zeros({3 * d});
        L.w_out = normal_tensor({d, d}, resid_std, rng);
        L.b_out = Tensor<float>::zeros({d});
        L.ln2_gain = Tensor<float>({d}, 1.0f);
        L.ln2_bias = Tensor<float>::zeros({d});
        L.w_ff1 = normal_tensor({d, config.d_ff}, std, rng);
        L.b_ff1 = Tensor<float>::zeros({config.d_ff});
        L.w_ff2 = normal_tensor({config.d_ff, d}, resid_std, rng);
        L.b_ff2 = Tensor<float>::zeros({d});
        p.layers.push_back(std::move(L));
    }
    p.lnf_gain = Tensor<float>({d}, 1.0f);
    p.lnf_bias = Tensor<float>::zeros({d});
    p.unembed = normal_tensor({d, config.vocab_size}, std, rng);
    return p;
}

template <typename U, typename T>
ModelParams<U> cast_params(const ModelParams<T>& params) {
    ModelParams<U> out;
    out.layers.resize(params.layers.size());
    std::vector<Tensor<U>*> dst;
    out.visit([&](const std::string&, Tensor<U>& t) { dst.push_back(&t); });
    std::size_t i = 0;
    params.visit([&](const std::string&, const Tensor<T>& t) { *dst[i++] = t.template cast<U>(); });
    return out;
}

template <typename T>
void check_params(const ModelParams<T>& params, const ModelConfig& config) {
    config.validate();
    if (static_cast<int>(params.layers.size()) != config.n_layers) {
        throw DimensionError("model has " + std::to_string(params.layers.size()) + " layers, config says " +
                             std::to_string(config.n_layers));
    }
    const int d = config.d_model, V = config.vocab_size, F = config.d_ff;
    auto expect = [](const std::string& name, const Tensor<T>& t, Shape shape) {
        if (t.shape() != shape) {
            throw DimensionError(name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(shape));
        }
        if (!t.all_finite()) throw DivergenceError(name + " contains non-finite values");
    };
    expect("tok_emb", params.tok_emb, {V, d});
    expect("pos_emb", params.pos_emb, {config.max_seq_len, d});
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& L = params.layers[l];
        const std::string pre = "layer" + std::to_string(l) + ".";
        expect(pre + "ln1.gain", L.ln1_gain, {d});
        expect(pre + "ln1.bias", L.ln1_bias, {d});
        expect(pre + "attn.w_qkv", L.w_qkv, {d, 3 * d});
        expect(pre + "attn.b_qkv", L.b_qkv, {3 * d});
        expect(pre + "attn.w_out", L.w_out, {d, d});
        expect(pre + "attn.b_out", L.b_out, {d});
        expect(pre + "ln2.gain", L.ln2_gain, {d});
        expect(pre + "ln2.bias", L.ln2_bias, {d});
        expect(pre + "mlp.w_ff1", L.w_ff1, {d, F});
        expect(pre + "mlp.b_ff1", L.b_ff1, {F});
        expect(pre + "mlp.w_ff2", L.w_ff2, {F, d});
        expect(pre + "mlp.b_ff2", L.b_ff2, {d});
    }
    expect("lnf.gain", params.lnf_gain, {d});
    expect("lnf.bias", params.lnf_bias, {d});
    expect("unembed", params.unembed, {d, V});
}

template <typename T>
ModelVars<T> bind(ad::Tape<T>& tape, const ModelParams<T>& params, bool trainable) {
    ModelVars<T> vars;
    vars.layers.resize(params.layers.size());
    std::vector<ad::Var<T>*> slots;
    vars.visit([&](const std::string&, ad::Var<T>& v) { slots.push_back(&v); });
    std::size_t i = 0;
    params.visit([&](const std::string&, const Tensor<T>& t) {
        *slots[i++] = trainable ? tape.leaf(t) : tape.constant(t);
    });
    return vars;
}

template <typename T>
ModelParams<T> collect_grads(const ModelVars<T>& vars) {
    ModelParams<T> grads;
    grads.layers.resize(vars.layers.size());
    std::vector<Tensor<T>*> slots;
    grads.visit([&](const std::string&, Tensor<T>& t) { slots.push_back(&t); });
    std::size_t i = 0;
    vars.visit([&](const std::string&, const ad::Var<T>& v) { *slots[i++] = v.grad(); });
    return grads;
}

PackedBatch PackedBatch::pack(std::span<const std::vector<int>> sequences) {
    PackedBatch b;
    for (const auto& seq : sequences) {
        if (seq.empty()) throw InputError("cannot pack an empty sequence");
        b.segments.push_back({static_cast<int>(b.tokens.size()), static_cast<int>(seq.size())});
        for (std::size_t i = 0; i < seq.size(); ++i) {
            b.tokens.push_back(seq[i]);
            b.positions.push_back(static_cast<int>(i));
        }
    }
    return b;
}

template <typename T>
ad::Var<T> unembed_rows(const ModelVars<T>& vars, ad::Var<T> hidden) {
    return ad::matmul(ad::layer_norm(hidden, vars.lnf_gain, vars.lnf_bias), vars.unembed);
}

template <typename T>
BatchTrace<T> forward_batch(const ModelVars<T>& vars, const ModelConfig& config,
                            const PackedBatch& batch, std::span<const int> logit_rows) {
    if (batch.segments.empty()) throw InputError("forward on an empty batch");
    for (const auto& seg : batch.segments) {
        if (seg.len > config.max_seq_len) {
            throw InputError("sequence of length " + std::to_string(seg.len) + " exceeds max_seq_len " +
                             std::to_string(config.max_seq_len));
        }
    }
    for (int tok : batch.tokens) {
        if (tok < 0 || tok >= config.vocab_size) {
            throw InputError("token id " + std::to_string(tok) + " outside vocabulary of " +
                             std::to_string(config.vocab_size));
        }
    }
    BatchTrace<T> trace;
    auto x = ad::add(ad::gather_rows(vars.tok_emb, batch.tokens), ad::gather_rows(vars.pos_emb, batch.positions));
    trace.hidden.push_back(x);
    for (const auto& L : vars.layers) {
        auto a = ad::layer_norm(x, L.ln1_gain, L.ln1_bias);
        auto qkv = ad::add_bias(ad::matmul(a, L.w_qkv), L.b_qkv);
        auto att = ad::causal_attention(qkv, std::span<const kernels::Segment>(batch.segments), config.n_heads);
        x = ad::add(x, ad::add_bias(ad::matmul(att, L.w_out), L.b_out));
        auto m = ad::layer_norm(x, L.ln2_gain, L.ln2_bias);
        auto f = ad::gelu(ad::add_bias(ad::matmul(m, L.w_ff1), L.b_ff1));
        x = ad::add(x, ad::add_bias(ad::matmul(f, L.w_ff2), L.b_ff2));
        trace.hidden.push_back(x);
    }
    trace.logits = logit_rows.empty() ? unembed_rows(vars, x) : unembed_rows(vars, ad::gather_rows(x, logit_rows));
    return trace;
}

template <typename T>
ForwardTrace<T> forward(const ModelParams<T>& params, const ModelConfig& config, std::span<const int> tokens) {
    if (tokens.empty()) throw InputError("forward on an empty token sequence");
    ad::Tape<T> tape;
    const auto vars = bind(tape, params, false);
    const std::vector<std::vector<int>> seqs{std::vector<int>(tokens.begin(), tokens.end())};
    const auto batch = PackedBatch::pack(seqs);
    const auto bt = forward_batch(vars, config, batch);
    ForwardTrace<T> trace;
    trace.logits = bt.logits.value();
    for (const auto& h : bt.hidden) trace.hidden.push_back(h.value());
    return trace;
}

template <typename T>
const Tensor<T>& hidden_at(const ForwardTrace<T>& trace, int layer) {
    if (layer < 0 || layer >= static_cast<int>(trace.hidden.size())) {
        throw IndexError("layer " + std::to_string(layer) + " outside [0, " +
                         std::to_string(static_cast<int>(trace.hidden.size()) - 1) + "]");
    }
    return trace.hidden[static_cast<std::size_t>(layer)];
}

template <typename T>
int argmax(std::span<const T> values) {
    int best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    }
    return best;
}

std::vector<std::vector<int>> generate_batch(const ModelParams<float>& params, const ModelConfig& config,
                                             std::span<const std::vector<int>> prompts, int max_new, int eos) {
    std::vector<std::vector<int>> out(prompts.begin(), prompts.end());
    for (const auto& p : out) {
        if (p.empty()) throw InputError("generate: empty prompt");
        if (static_cast<int>(p.size()) > config.max_seq_len) {
            throw InputError("generate: prompt of length " + std::to_string(p.size()) + " exceeds max_seq_len " +
                             std::to_string(config.max_seq_len));
        }
    }
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < out.size(); ++i) active.push_back(i);
    constexpr std::size_t kChunk = 64;
    for (int step = 0; step < max_new && !active.empty(); ++step) {
        std::vector<std::size_t> still;
        for (std::size_t c0 = 0; c0 < active.size(); c0 += kChunk) {
            const std::size_t c1 = std::min(active.size(), c0 + kChunk);
            std::vector<std::vector<int>> seqs;
            for (std::size_t i = c0; i < c1; ++i) seqs.push_back(out[active[i]]);
            const auto batch = PackedBatch::pack(seqs);
            std::vector<int> last;
            for (const auto& seg : batch.segments) last.push_back(seg.start + seg.len - 1);
            ad::Tape<float> tape;
            const auto vars = bind(tape, params, false);
            const auto trace = forward_batch(vars, config, batch, last);
            const auto& logits = trace.logits.value();
            for (std::size_t i = c0; i < c1; ++i) {
                const auto row = logits.data().subspan((i - c0) * static_cast<std::size_t>(config.vocab_size),
                                                       static_cast<std::size_t>(config.vocab_size));
                const int next = argmax<float>(row);
                auto& seq = out[active[i]];
                seq.push_back(next);
                if (next != eos && static_cast<int>(seq.size()) < config.max_seq_len) still.push_back(active[i]);
            }
        }
        active = std::move(still);
    }
    return out;
}

std::vector<int> generate(const ModelParams<float>& params, const ModelConfig& config, std::span<const int> prompt,
                          int max_new, int eos) {
    const std::vector<std::vector<int>> prompts{std::vector<int>(prompt.begin(), prompt.end())};
    return generate_batch(params, config, prompts, max_new, eos).front();
}

#define AXLAB_INSTANTIATE_MODEL(T)                                                                           \
    template void check_params<T>(const ModelParams<T>&, const ModelConfig&);                               \
    template ModelVars<T> bind<T>(ad::Tape<T>&, const ModelParams<T>&, bool);                                \
    template ModelParams<T> collect_grads<T>(const ModelVars<T>&);                                           \
    template ad::Var<T> unembed_rows<T>(const ModelVars<T>&, ad::Var<T>);                                    \
    template BatchTrace<T> forward_batch<T>(const ModelVars<T>&, const ModelConfig&,          \
                                            const PackedBatch&, std::span<const int>);                       \
    template ForwardTrace<T> forward<T>(const ModelParams<T>&, const ModelConfig&, std::span<const int>);   \
    template const Tensor<T>& hidden_at<T>(const ForwardTrace<T>&, int);                                    \
    template int argmax<T>(std::span<const T>);

AXLAB_INSTANTIATE_MODEL(float)
AXLAB_INSTANTIATE_MODEL(double)

template ModelParams<double> cast_params<double, float>(const ModelParams<float>&);
template ModelParams<float> cast_params<float, double>(const ModelParams<double>&);
template ModelParams<float> cast_params<float, float>(const ModelParams<float>&);

}  // namespace axlab::model
