#pragma once

// Training objectives: next-token prediction, instruction contrastive
// alignment on mean-pooled span representations (in-batch negatives), and the
// language-matching classifier over concatenated final-layer representations.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "axlab/autodiff.hpp"
#include "axlab/model.hpp"
#include "axlab/rng.hpp"
#include "axlab/toy_data.hpp"

namespace axlab::losses {

struct LossWeights {
    double alpha1 = 0.3;  // contrastive term
    double alpha2 = 0.4;  // language matching term
    double tau = 0.1;     // contrastive temperature

    void validate() const;
};

enum class SpanRole { source, target };

template <typename T>
struct SentenceRep {
    ad::Var<T> vector;  // [d_model]
    int lang = 0;
    int example = 0;    // index within the batch
    SpanRole role = SpanRole::source;
};

inline constexpr int kClassifierHidden = 128;
inline constexpr int kClassifierClasses = 2;  // 0 = unmatched, 1 = matched

/// Two-layer MLP on [rep_a ; rep_b]: Linear(2d, 128) -> ReLU -> Linear(128, 2).
template <typename X>
struct ClassifierWeights {
    X w1, b1;  // [2d x 128], [128]
    X w2, b2;  // [128 x 2], [2]

    template <typename F>
    void visit(F&& f) { visit_impl(*this, f); }
    template <typename F>
    void visit(F&& f) const { visit_impl(*this, f); }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f(std::string("cls.w1"), self.w1);
        f(std::string("cls.b1"), self.b1);
        f(std::string("cls.w2"), self.w2);
        f(std::string("cls.b2"), self.b2);
    }
};

template <typename T>
using ClassifierParams = ClassifierWeights<Tensor<T>>;
template <typename T>
using ClassifierVars = ClassifierWeights<ad::Var<T>>;

ClassifierParams<float> init_classifier(int d_model, std::uint64_t seed);
template <typename U, typename T>
ClassifierParams<U> cast_classifier(const ClassifierParams<T>& params);
template <typename T>
ClassifierVars<T> bind_classifier(ad::Tape<T>& tape, const ClassifierParams<T>& params, bool trainable);
template <typename T>
ClassifierParams<T> collect_classifier_grads(const ClassifierVars<T>& vars);

/// Mean-pooled source and target span representations of batch entry `index`
/// at hidden layer `layer`. Spans are relative to the example's own tokens.
template <typename T>
std::pair<SentenceRep<T>, SentenceRep<T>> extract_reps(const model::BatchTrace<T>& trace,
                                                       const model::PackedBatch& batch, int index,
                                                       const data::InstructionExample& example, int layer);

/// Mean over i of -log softmax_j(cos(a_i, c_j) / tau)[i], j over all B candidates.
template <typename T>
ad::Var<T> ctr_loss(std::span<const ad::Var<T>> anchors, std::span<const ad::Var<T>> candidates, T tau);

struct LamPair {
    int a = 0;  // indices into the rep pool
    int b = 0;
    int label = 0;  // 1 matched, 0 unmatched
};

struct LamPairing {
    std::vector<LamPair> pairs;
    bool balanced = true;  // false when the batch could not supply the 50/50 split
};

/// Draws `count` pairs from a pool of reps described by their languages:
/// ceil(count/2) matched and floor(count/2) unmatched when possible.
LamPairing lam_pairs(std::span<const int> pool_langs, int count, Rng& rng);

/// Mean 2-class cross-entropy of the classifier on concatenated pair reps.
template <typename T>
ad::Var<T> lam_loss(std::span<const ad::Var<T>> pool, std::span<const LamPair> pairs,
                    const ClassifierVars<T>& classifier);

/// Single sequence: mean over positions j >= 1 of -log P(tokens[j] | tokens[<j]).
template <typename T>
ad::Var<T> ntp_loss(ad::Var<T> logits, std::span<const int> tokens);

/// Packed batch: per-sequence NTP means, averaged over sequences.
template <typename T>
ad::Var<T> ntp_loss_batch(ad::Var<T> logits, const model::PackedBatch& batch);

/// L_NTP + alpha1 L_CTR + alpha2 L_LAM on the tape. Either auxiliary Var may be
/// invalid (absent); it then contributes nothing.
template <typename T>
ad::Var<T> combined_loss(ad::Var<T> ntp, ad::Var<T> ctr, ad::Var<T> lam, const LossWeights& weights);

/// Scalar version; throws DivergenceError naming the first non-finite component.
double combined_value(double ntp, double ctr, double lam, const LossWeights& weights);

}  // namespace axlab::losses
