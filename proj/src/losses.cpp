#include "axlab/losses.hpp"

#include <cmath>

#include "axlab/errors.hpp"

namespace axlab::losses {

void LossWeights::validate() const {
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (alpha1 < 0.0 || alpha2 < 0.0) throw ConfigError("loss weights must be non-negative");
}

ClassifierParams<float> init_classifier(int d_model, std::uint64_t seed) {
    Rng rng(seed);
    ClassifierParams<float> p;
    const int in = 2 * d_model;
    // He-normal for the ReLU layer, small output layer so the initial loss is ~ln 2.
    p.w1 = Tensor<float>(Shape{in, kClassifierHidden});
    const double std1 = std::sqrt(2.0 / in);
    for (auto& v : p.w1.storage()) v = static_cast<float>(rng.normal() * std1);
    p.b1 = Tensor<float>::zeros({kClassifierHidden});
    p.w2 = Tensor<float>(Shape{kClassifierHidden, kClassifierClasses});
    for (auto& v : p.w2.storage()) v = static_cast<float>(rng.normal() * 0.02);
    p.b2 = Tensor<float>::zeros({kClassifierClasses});
    return p;
}

template <typename U, typename T>
ClassifierParams<U> cast_classifier(const ClassifierParams<T>& params) {
    return {params.w1.template cast<U>(), params.b1.template cast<U>(), params.w2.template cast<U>(),
            params.b2.template cast<U>()};
}

template <typename T>
ClassifierVars<T> bind_classifier(ad::Tape<T>& tape, const ClassifierParams<T>& params, bool trainable) {
    auto mk = [&](const Tensor<T>& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
    return {mk(params.w1), mk(params.b1), mk(params.w2), mk(params.b2)};
}

template <typename T>
ClassifierParams<T> collect_classifier_grads(const ClassifierVars<T>& vars) {
    return {vars.w1.grad(), vars.b1.grad(), vars.w2.grad(), vars.b2.grad()};
}

template <typename T>
std::pair<SentenceRep<T>, SentenceRep<T>> extract_reps(const model::BatchTrace<T>& trace,
                                                       const model::PackedBatch& batch, int index,
                                                       const data::InstructionExample& example, int layer) {
    if (layer < 0 || layer >= static_cast<int>(trace.hidden.size())) {
        throw IndexError("layer " + std::to_string(layer) + " not in trace");
    }
    if (index < 0 || index >= static_cast<int>(batch.segments.size())) {
        throw IndexError("batch index " + std::to_string(index) + " out of range");
    }
    const auto seg = batch.segments[static_cast<std::size_t>(index)];
    auto check = [&](const data::Span& s, const char* what) {
        if (s.start < 0 || s.end > seg.len || s.start >= s.end) {
            throw InvalidSpanError(std::string(what) + " span [" + std::to_string(s.start) + ", " +
                                   std::to_string(s.end) + ") outside sequence of length " + std::to_string(seg.len));
        }
    };
    check(example.src_span, "source");
    check(example.tgt_span, "target");
    const auto h = trace.hidden[static_cast<std::size_t>(layer)];
    SentenceRep<T> src{ad::mean_pool(h, seg.start + example.src_span.start, seg.start + example.src_span.end),
                       example.src_lang, index, SpanRole::source};
    SentenceRep<T> tgt{ad::mean_pool(h, seg.start + example.tgt_span.start, seg.start + example.tgt_span.end),
                       example.tgt_lang, index, SpanRole::target};
    return {src, tgt};
}

template <typename T>
ad::Var<T> ctr_loss(std::span<const ad::Var<T>> anchors, std::span<const ad::Var<T>> candidates, T tau) {
    if (anchors.empty()) throw DimensionError("ctr_loss: empty batch");
    if (anchors.size() != candidates.size()) {
        throw DimensionError("ctr_loss: " + std::to_string(anchors.size()) + " anchors vs " +
                             std::to_string(candidates.size()) + " candidates");
    }
    if (!(tau > T(0))) throw ConfigError("ctr_loss: tau must be positive");
    const auto a = ad::normalize_rows(ad::stack_rows(anchors));
    const auto c = ad::normalize_rows(ad::stack_rows(candidates));
    const auto sim = ad::scale(ad::matmul(a, ad::transpose(c)), T(1) / tau);
    std::vector<int> diag(anchors.size());
    for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
    return ad::cross_entropy(sim, std::span<const int>(diag));
}

LamPairing lam_pairs(std::span<const int> pool_langs, int count, Rng& rng) {
    const int n = static_cast<int>(pool_langs.size());
    if (n < 2) throw DimensionError("lam_pairs: need at least 2 representations, got " + std::to_string(n));
    if (count < 1) throw DimensionError("lam_pairs: pair count must be positive");
    // Representations that have at least one partner of the same / another language.
    std::vector<int> can_match, can_mismatch;
    for (int i = 0; i < n; ++i) {
        bool same = false, other = false;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            if (pool_langs[static_cast<std::size_t>(j)] == pool_langs[static_cast<std::size_t>(i)]) same = true;
            else other = true;
        }
        if (same) can_match.push_back(i);
        if (other) can_mismatch.push_back(i);
    }
    int want_matched = (count + 1) / 2;
    int want_unmatched = count / 2;
    LamPairing out;
    if (can_match.empty()) {
        want_unmatched += want_matched;
        want_matched = 0;
        out.balanced = false;
    } else if (can_mismatch.empty()) {
        want_matched += want_unmatched;
        want_unmatched = 0;
        out.balanced = false;
    }
    auto draw_partner = [&](int a, bool matched) {
        std::vector<int> options;
        for (int j = 0; j < n; ++j) {
            if (j == a) continue;
            const bool same = pool_langs[static_cast<std::size_t>(j)] == pool_langs[static_cast<std::size_t>(a)];
            if (same == matched) options.push_back(j);
        }
        return options[static_cast<std::size_t>(rng.uniform_below(options.size()))];
    };
    for (int i = 0; i < want_matched; ++i) {
        const int a = can_match[static_cast<std::size_t>(rng.uniform_below(can_match.size()))];
        out.pairs.push_back({a, draw_partner(a, true), 1});
    }
    for (int i = 0; i < want_unmatched; ++i) {
        const int a = can_mismatch[static_cast<std::size_t>(rng.uniform_below(can_mismatch.size()))];
        out.pairs.push_back({a, draw_partner(a, false), 0});
    }
    return out;
}

template <typename T>
ad::Var<T> lam_loss(std::span<const ad::Var<T>> pool, std::span<const LamPair> pairs,
                    const ClassifierVars<T>& classifier) {
    if (pairs.empty()) throw DimensionError("lam_loss: no pairs");
    std::vector<ad::Var<T>> rows;
    std::vector<int> labels;
    for (const auto& p : pairs) {
        if (p.a < 0 || p.b < 0 || p.a >= static_cast<int>(pool.size()) || p.b >= static_cast<int>(pool.size())) {
            throw IndexError("lam_loss: pair index outside representation pool");
        }
        const std::vector<ad::Var<T>> both{pool[static_cast<std::size_t>(p.a)], pool[static_cast<std::size_t>(p.b)]};
        rows.push_back(ad::concat(std::span<const ad::Var<T>>(both), 0));
        labels.push_back(p.label);
    }
    const auto x = ad::stack_rows(std::span<const ad::Var<T>>(rows));
    const auto hidden = ad::relu(ad::add_bias(ad::matmul(x, classifier.w1), classifier.b1));
    const auto logits = ad::add_bias(ad::matmul(hidden, classifier.w2), classifier.b2);
    return ad::cross_entropy(logits, std::span<const int>(labels));
}

template <typename T>
ad::Var<T> ntp_loss(ad::Var<T> logits, std::span<const int> tokens) {
    const int n = static_cast<int>(tokens.size());
    if (n < 2) throw InputError("ntp_loss: sequence needs at least 2 tokens");
    if (logits.value().rank() != 2 || logits.value().dim(0) != n) {
        throw DimensionError("ntp_loss: logits " + shape_str(logits.value().shape()) + " for " + std::to_string(n) +
                             " tokens");
    }
    std::vector<int> targets(static_cast<std::size_t>(n), 0);
    std::vector<T> weights(static_cast<std::size_t>(n), T(0));
    for (int j = 0; j + 1 < n; ++j) {
        targets[static_cast<std::size_t>(j)] = tokens[static_cast<std::size_t>(j + 1)];
        weights[static_cast<std::size_t>(j)] = T(1) / static_cast<T>(n - 1);
    }
    return ad::weighted_cross_entropy(logits, std::span<const int>(targets), std::span<const T>(weights));
}

template <typename T>
ad::Var<T> ntp_loss_batch(ad::Var<T> logits, const model::PackedBatch& batch) {
    const int rows = batch.rows();
    if (logits.value().rank() != 2 || logits.value().dim(0) != rows) {
        throw DimensionError("ntp_loss_batch: logits " + shape_str(logits.value().shape()) + " for " +
                             std::to_string(rows) + " rows");
    }
    std::vector<int> targets(static_cast<std::size_t>(rows), 0);
    std::vector<T> weights(static_cast<std::size_t>(rows), T(0));
    const T per_seq = T(1) / static_cast<T>(batch.segments.size());
    for (const auto& seg : batch.segments) {
        if (seg.len < 2) throw InputError("ntp_loss_batch: sequence needs at least 2 tokens");
        for (int j = 0; j + 1 < seg.len; ++j) {
            const auto r = static_cast<std::size_t>(seg.start + j);
            targets[r] = batch.tokens[r + 1];
            weights[r] = per_seq / static_cast<T>(seg.len - 1);
        }
    }
    return ad::weighted_cross_entropy(logits, std::span<const int>(targets), std::span<const T>(weights));
}

template <typename T>
ad::Var<T> combined_loss(ad::Var<T> ntp, ad::Var<T> ctr, ad::Var<T> lam, const LossWeights& weights) {
    weights.validate();
    auto check = [](ad::Var<T> v, const char* name) {
        if (v.valid() && !std::isfinite(static_cast<double>(v.value().item()))) {
            throw DivergenceError(std::string("non-finite ") + name + " loss");
        }
    };
    check(ntp, "ntp");
    check(ctr, "ctr");
    check(lam, "lam");
    auto total = ntp;
    if (ctr.valid() && weights.alpha1 != 0.0) total = ad::add(total, ad::scale(ctr, static_cast<T>(weights.alpha1)));
    if (lam.valid() && weights.alpha2 != 0.0) total = ad::add(total, ad::scale(lam, static_cast<T>(weights.alpha2)));
    return total;
}

double combined_value(double ntp, double ctr, double lam, const LossWeights& weights) {
    if (!std::isfinite(ntp)) throw DivergenceError("non-finite ntp loss");
    if (!std::isfinite(ctr)) throw DivergenceError("non-finite ctr loss");
    if (!std::isfinite(lam)) throw DivergenceError("non-finite lam loss");
    return ntp + weights.alpha1 * ctr + weights.alpha2 * lam;
}

#define AXLAB_INSTANTIATE_LOSSES(T)                                                                           \
    template ClassifierVars<T> bind_classifier<T>(ad::Tape<T>&, const ClassifierParams<T>&, bool);           \
    template ClassifierParams<T> collect_classifier_grads<T>(const ClassifierVars<T>&);                     \
    template std::pair<SentenceRep<T>, SentenceRep<T>> extract_reps<T>(                                      \
        const model::BatchTrace<T>&, const model::PackedBatch&, int, const data::InstructionExample&, int); \
    template ad::Var<T> ctr_loss<T>(std::span<const ad::Var<T>>, std::span<const ad::Var<T>>, T);          \
    template ad::Var<T> lam_loss<T>(std::span<const ad::Var<T>>, std::span<const LamPair>,                  \
                                    const ClassifierVars<T>&);                                              \
    template ad::Var<T> ntp_loss<T>(ad::Var<T>, std::span<const int>);                                      \
    template ad::Var<T> ntp_loss_batch<T>(ad::Var<T>, const model::PackedBatch&);                           \
    template ad::Var<T> combined_loss<T>(ad::Var<T>, ad::Var<T>, ad::Var<T>, const LossWeights&);

AXLAB_INSTANTIATE_LOSSES(float)
AXLAB_INSTANTIATE_LOSSES(double)

template ClassifierParams<double> cast_classifier<double, float>(const ClassifierParams<float>&);
template ClassifierParams<float> cast_classifier<float, double>(const ClassifierParams<double>&);

}  // namespace axlab::losses
