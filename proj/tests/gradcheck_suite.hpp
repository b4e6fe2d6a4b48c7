#pragma once

// Finite-difference checks shared by the unit suites and the acceptance binary:
// one entry per autodiff op, plus the full combined objective on a tiny model.

#include <string>
#include <vector>

#include "axlab/autodiff.hpp"
#include "axlab/losses.hpp"
#include "axlab/model.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

namespace gradcheck {

using Tape = axlab::ad::Tape<double>;
using V = axlab::ad::Var<double>;
using Leaves = std::span<const V>;

struct OpCase {
    std::string name;
    std::vector<axlab::Shape> shapes;
    oracle::LossBuilder build;
    double input_scale = 1.0;
};

struct OpResult {
    std::string name;
    double worst = 0;
};

// Reduces any tensor to a scalar with fixed random weights so every output
// element carries a distinct upstream gradient.
inline V weighted_sum(Tape& tape, V x, std::uint64_t seed) {
    auto w = tape.constant(testing::random_tensor<double>(x.shape(), seed));
    return axlab::ad::sum(axlab::ad::mul(x, w));
}

inline std::vector<OpCase> op_cases() {
    namespace ad = axlab::ad;
    std::vector<OpCase> c;
    c.push_back({"add", {{3, 4}, {3, 4}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::add(x[0], x[1]), 1); }});
    c.push_back({"sub", {{3, 4}, {3, 4}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::sub(x[0], x[1]), 2); }});
    c.push_back({"mul", {{3, 4}, {3, 4}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::mul(x[0], x[1]), 3); }});
    c.push_back({"mul-self", {{5}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::mul(x[0], x[0]), 3); }});
    c.push_back({"scale", {{6}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::scale(x[0], -2.5), 4); }});
    c.push_back({"gelu", {{4, 5}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::gelu(x[0]), 5); }, 2.0});
    c.push_back({"relu", {{4, 5}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::relu(x[0]), 6); }});
    c.push_back({"masked_fill", {{2, 3}}, [](Tape& t, Leaves x) {
                     static const std::vector<std::uint8_t> mask{1, 0, 0, 1, 0, 1};
                     return weighted_sum(t, ad::masked_fill(x[0], mask, 7.0), 7);
                 }});
    c.push_back({"sum", {{3, 3}}, [](Tape&, Leaves x) { return ad::sum(x[0]); }});
    c.push_back({"mean", {{3, 3}}, [](Tape& t, Leaves x) {
                     return ad::mean(ad::mul(x[0], t.constant(testing::random_tensor<double>({3, 3}, 8))));
                 }});
    c.push_back({"reshape", {{2, 6}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::reshape(x[0], {3, 4}), 9); }});
    c.push_back({"transpose", {{2, 5}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::transpose(x[0]), 10); }});
    c.push_back({"concat0", {{2, 3}, {4, 3}}, [](Tape& t, Leaves x) {
                     std::vector<V> p{x[0], x[1]};
                     return weighted_sum(t, ad::concat<double>(p, 0), 11);
                 }});
    c.push_back({"concat1", {{2, 3}, {2, 1}}, [](Tape& t, Leaves x) {
                     std::vector<V> p{x[0], x[1], x[0]};
                     return weighted_sum(t, ad::concat<double>(p, 1), 12);
                 }});
    c.push_back({"concat-vectors", {{3}, {2}}, [](Tape& t, Leaves x) {
                     std::vector<V> p{x[0], x[1]};
                     return weighted_sum(t, ad::concat<double>(p, 0), 13);
                 }});
    c.push_back({"stack_rows", {{4}, {4}}, [](Tape& t, Leaves x) {
                     std::vector<V> p{x[1], x[0], x[1]};
                     return weighted_sum(t, ad::stack_rows<double>(p), 14);
                 }});
    c.push_back({"slice_rows", {{5, 3}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::slice_rows(x[0], 1, 4), 15); }});
    c.push_back({"matmul", {{3, 4}, {4, 5}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::matmul(x[0], x[1]), 16); }});
    c.push_back({"matmul-shared", {{4, 4}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::matmul(x[0], x[0]), 17); }});
    c.push_back({"add_bias", {{3, 4}, {4}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::add_bias(x[0], x[1]), 18); }});
    c.push_back({"gather_rows", {{4, 3}}, [](Tape& t, Leaves x) {
                     static const std::vector<int> ids{2, 0, 2, 3, 2};
                     return weighted_sum(t, ad::gather_rows(x[0], ids), 19);
                 }});
    c.push_back({"layer_norm", {{3, 6}, {6}, {6}}, [](Tape& t, Leaves x) {
                     return weighted_sum(t, ad::layer_norm(x[0], x[1], x[2]), 20);
                 }});
    c.push_back({"softmax", {{3, 5}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::softmax(x[0]), 21); }});
    c.push_back({"softmax-axis0", {{3, 5}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::softmax(x[0], 0), 22); }});
    c.push_back({"cross_entropy", {{4, 7}}, [](Tape&, Leaves x) {
                     static const std::vector<int> tg{0, 6, 3, 3};
                     return ad::cross_entropy(x[0], tg);
                 }});
    c.push_back({"weighted_cross_entropy", {{3, 4}}, [](Tape&, Leaves x) {
                     static const std::vector<int> tg{1, 2, 0};
                     static const std::vector<double> w{0.5, 0.0, 1.5};
                     return ad::weighted_cross_entropy(x[0], tg, std::span<const double>(w));
                 }});
    c.push_back({"mean_pool", {{5, 4}}, [](Tape& t, Leaves x) { return weighted_sum(t, ad::mean_pool(x[0], 1, 4), 23); }});
    c.push_back({"cosine_sim", {{6}, {6}}, [](Tape&, Leaves x) { return ad::cosine_sim(x[0], x[1]); }});
    c.push_back({"cosine_sim-self", {{6}}, [](Tape& t, Leaves x) {
                     return ad::cosine_sim(x[0], ad::add(x[0], t.constant(testing::random_tensor<double>({6}, 24))));
                 }});
    c.push_back({"normalize_rows", {{3, 4}}, [](Tape& t, Leaves x) {
                     return weighted_sum(t, ad::normalize_rows(x[0]), 25);
                 }});
    c.push_back({"causal_attention", {{7, 12}}, [](Tape& t, Leaves x) {
                     static const std::vector<axlab::kernels::Segment> segs{{0, 3}, {3, 4}};
                     return weighted_sum(t, ad::causal_attention(x[0], std::span<const axlab::kernels::Segment>(segs), 2),
                                         26);
                 }});
    return c;
}

/// Worst relative error of one op over `trials` random input draws.
inline OpResult run_op(const OpCase& op, int trials) {
    double worst = 0;
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<axlab::Tensor<double>> inputs;
        for (std::size_t i = 0; i < op.shapes.size(); ++i) {
            inputs.push_back(testing::random_tensor<double>(op.shapes[i], 1000 * trial + i, op.input_scale));
        }
        worst = std::max(worst, oracle::grad_check(op.build, inputs).rel_error);
    }
    return {op.name, worst};
}

inline axlab::data::InstructionExample hand_example(std::vector<int> tokens, axlab::data::Span src,
                                                    axlab::data::Span tgt, int sl, int tl) {
    axlab::data::InstructionExample ex;
    ex.tokens = std::move(tokens);
    ex.src_span = src;
    ex.tgt_span = tgt;
    ex.src_lang = sl;
    ex.tgt_lang = tl;
    return ex;
}

/// NTP + 0.3 CTR + 0.4 LAM on a d_model 8, 2-layer model over three packed
/// examples, differentiated with respect to every backbone and classifier tensor.
struct CombinedProblem {
    axlab::model::ModelConfig cfg = testing::tiny_config(11);
    std::vector<axlab::Tensor<double>> inputs;
    std::vector<axlab::data::InstructionExample> examples{
        hand_example({0, 3, 4, 2, 6, 7, 1}, {1, 3}, {4, 6}, 0, 1),
        hand_example({0, 5, 8, 9, 2, 10, 6, 1}, {1, 4}, {5, 7}, 0, 2),
        hand_example({0, 7, 2, 3, 9, 1}, {1, 2}, {3, 5}, 2, 0)};

    CombinedProblem() {
        namespace m = axlab::model;
        namespace L = axlab::losses;
        auto p = m::cast_params<double>(m::init_params(cfg, 5));
        std::uint64_t s = 500;
        p.visit([&](const std::string&, axlab::Tensor<double>& t) {
            auto noise = testing::random_tensor<double>(t.shape(), ++s, 0.3);
            for (std::size_t i = 0; i < t.numel(); ++i) t[i] += noise[i];
        });
        auto cls = L::cast_classifier<double>(L::init_classifier(cfg.d_model, 6));
        for (auto& v : cls.w2.storage()) v *= 20;  // make the classifier output depend on its input
        p.visit([&](const std::string&, const axlab::Tensor<double>& t) { inputs.push_back(t); });
        cls.visit([&](const std::string&, const axlab::Tensor<double>& t) { inputs.push_back(t); });
    }

    /// Loss from leaves in visit order (backbone, then classifier).
    V loss(std::span<const V> leaves) const {
        namespace m = axlab::model;
        namespace L = axlab::losses;
        m::ModelVars<double> vars;
        vars.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        L::ClassifierVars<double> cv;
        std::size_t i = 0;
        vars.visit([&](const std::string&, V& v) { v = leaves[i++]; });
        cv.visit([&](const std::string&, V& v) { v = leaves[i++]; });
        std::vector<std::vector<int>> seqs;
        for (const auto& e : examples) seqs.push_back(e.tokens);
        auto batch = m::PackedBatch::pack(seqs);
        auto tr = m::forward_batch(vars, cfg, batch);
        std::vector<V> anchors, cands, pool;
        std::vector<int> langs;
        for (int k = 0; k < 3; ++k) {
            auto [a, c] = L::extract_reps(tr, batch, k, examples[static_cast<std::size_t>(k)], cfg.align_layer);
            anchors.push_back(a.vector);
            cands.push_back(c.vector);
            auto [fa, fc] = L::extract_reps(tr, batch, k, examples[static_cast<std::size_t>(k)], cfg.n_layers);
            pool.push_back(fa.vector);
            pool.push_back(fc.vector);
            langs.push_back(fa.lang);
            langs.push_back(fc.lang);
        }
        axlab::Rng rng(7);
        auto pairs = L::lam_pairs(langs, 3, rng);
        auto ntp = L::ntp_loss_batch(tr.logits, batch);
        auto c = L::ctr_loss<double>(anchors, cands, 0.1);
        auto l = L::lam_loss<double>(pool, pairs.pairs, cv);
        return L::combined_loss(ntp, c, l, L::LossWeights{});
    }

    oracle::GradCheck check() const {
        return oracle::grad_check([this](Tape&, std::span<const V> leaves) { return loss(leaves); },
                                  inputs);
    }
};

}  // namespace gradcheck
