#pragma once

// Translation quality: exact match, position-wise token accuracy and
// token-level corpus BLEU, reported per translation direction.

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "axlab/model.hpp"
#include "axlab/probes.hpp"
#include "axlab/toy_data.hpp"

namespace axlab::metrics {

using Sentences = std::span<const std::vector<int>>;

/// Drops everything from the first EOS on.
std::vector<int> strip_eos(std::span<const int> tokens);

/// Fraction of hypotheses identical to their reference after strip_eos.
double exact_match(Sentences hypotheses, Sentences references);

/// Matching positions over the longer of each pair, pooled over the corpus.
double token_accuracy(Sentences hypotheses, Sentences references);

/// Corpus BLEU over token n-grams: clipped precisions for n = 1..N with
/// uniform weights and brevity penalty exp(min(0, 1 - r/c)). N is max_n
/// capped at the longest hypothesis. A zero precision is replaced by
/// 1 / (2 * number of hypothesis n-grams). Empty hypotheses everywhere give 0.
double corpus_bleu(Sentences hypotheses, Sentences references, int max_n = 4);

struct EvalResult {
    int src = 0;
    int tgt = 0;
    double exact_match = 0;
    double token_accuracy = 0;
    double bleu = 0;
    double otr = 0;
    int n = 0;
};

/// Per-direction metrics for already extracted responses.
std::vector<EvalResult> evaluate_responses(const data::Dataset& eval, Sentences responses, const data::Vocab& vocab);

/// Greedy generation over the eval set, then evaluate_responses().
std::vector<EvalResult> evaluate(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                 const data::Dataset& eval, const data::Vocab& vocab, int max_new = 16);

/// Answers every eval prompt with its reference followed by EOS.
probes::Generator reference_generator(const data::Dataset& eval);

/// Example-weighted exact match over the directions accepted by `keep`.
template <typename Pred>
double pooled_exact_match(std::span<const EvalResult> results, Pred keep) {
    double hits = 0;
    int n = 0;
    for (const auto& r : results) {
        if (!keep(r)) continue;
        hits += r.exact_match * r.n;
        n += r.n;
    }
    return n == 0 ? 0.0 : hits / n;
}

std::string eval_csv(std::span<const EvalResult> results);
nlohmann::ordered_json eval_json(std::span<const EvalResult> results);

}  // namespace axlab::metrics
