#include "axlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "axlab/errors.hpp"

namespace axlab::metrics {

namespace {

void check_pair(Sentences h, Sentences r, const char* what) {
    if (h.size() != r.size()) {
        throw DataError(std::string(what) + ": " + std::to_string(h.size()) + " hypotheses vs " +
                        std::to_string(r.size()) + " references");
    }
    if (h.empty()) throw DataError(std::string(what) + ": empty corpus");
}

using NgramCounts = std::map<std::vector<int>, int>;

NgramCounts ngrams(const std::vector<int>& s, int n) {
    NgramCounts out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
        ++out[std::vector<int>(s.begin() + static_cast<std::ptrdiff_t>(i),
                               s.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    }
    return out;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

}  // namespace

std::vector<int> strip_eos(std::span<const int> tokens) {
    const auto it = std::find(tokens.begin(), tokens.end(), data::Vocab::kEos);
    return std::vector<int>(tokens.begin(), it);
}

double exact_match(Sentences hypotheses, Sentences references) {
    check_pair(hypotheses, references, "exact_match");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        if (strip_eos(hypotheses[i]) == strip_eos(references[i])) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(hypotheses.size());
}

double token_accuracy(Sentences hypotheses, Sentences references) {
    check_pair(hypotheses, references, "token_accuracy");
    std::size_t matched = 0, total = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        const auto h = strip_eos(hypotheses[i]);
        const auto r = strip_eos(references[i]);
        for (std::size_t k = 0; k < std::min(h.size(), r.size()); ++k) matched += h[k] == r[k];
        total += std::max(h.size(), r.size());
    }
    return total == 0 ? 1.0 : static_cast<double>(matched) / static_cast<double>(total);
}

double corpus_bleu(Sentences hypotheses, Sentences references, int max_n) {
    check_pair(hypotheses, references, "corpus_bleu");
    if (max_n < 1) throw DataError("corpus_bleu: max_n must be >= 1");
    std::vector<std::vector<int>> hyps, refs;
    std::size_t c = 0, r = 0, longest = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        hyps.push_back(strip_eos(hypotheses[i]));
        refs.push_back(strip_eos(references[i]));
        c += hyps.back().size();
        r += refs.back().size();
        longest = std::max(longest, hyps.back().size());
    }
    if (c == 0) return 0.0;
    const int orders = std::min<int>(max_n, static_cast<int>(longest));
    double log_sum = 0.0;
    for (int n = 1; n <= orders; ++n) {
        long long matches = 0, count = 0;
        for (std::size_t i = 0; i < hyps.size(); ++i) {
            const auto hc = ngrams(hyps[i], n);
            const auto rc = ngrams(refs[i], n);
            for (const auto& [g, k] : hc) {
                count += k;
                const auto it = rc.find(g);
                if (it != rc.end()) matches += std::min(k, it->second);
            }
        }
        const double p = matches > 0 ? static_cast<double>(matches) / static_cast<double>(count)
                                     : 1.0 / (2.0 * static_cast<double>(count));
        log_sum += std::log(p);
    }
    const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(r) / static_cast<double>(c)));
    return bp * std::exp(log_sum / orders);
}

std::vector<EvalResult> evaluate_responses(const data::Dataset& eval, Sentences responses, const data::Vocab& vocab) {
    if (eval.empty()) throw DataError("evaluate: empty eval set");
    if (eval.size() != responses.size()) throw DataError("evaluate: responses and examples differ in count");
    std::map<std::pair<int, int>, std::vector<std::size_t>> by_dir;
    for (std::size_t i = 0; i < eval.size(); ++i) by_dir[{eval[i].src_lang, eval[i].tgt_lang}].push_back(i);
    const auto otr = probes::otr_from_responses(eval, responses, vocab);
    std::vector<EvalResult> out;
    std::size_t k = 0;
    for (const auto& [dir, idx] : by_dir) {
        std::vector<std::vector<int>> h, r;
        for (auto i : idx) {
            h.push_back(responses[i]);
            r.push_back(eval[i].reference());
        }
        EvalResult res;
        res.src = dir.first;
        res.tgt = dir.second;
        res.exact_match = exact_match(h, r);
        res.token_accuracy = token_accuracy(h, r);
        res.bleu = corpus_bleu(h, r);
        res.otr = otr[k++].ratio;
        res.n = static_cast<int>(idx.size());
        out.push_back(res);
    }
    return out;
}

std::vector<EvalResult> evaluate(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                 const data::Dataset& eval, const data::Vocab& vocab, int max_new) {
    const auto responses = probes::generate_responses(eval, probes::greedy_generator(params, config, max_new));
    return evaluate_responses(eval, responses, vocab);
}

probes::Generator reference_generator(const data::Dataset& eval) {
    std::map<std::vector<int>, std::vector<int>> answers;
    for (const auto& ex : eval) answers.emplace(ex.prompt(), ex.reference());
    return [answers = std::move(answers)](std::span<const std::vector<int>> prompts) {
        std::vector<std::vector<int>> out;
        for (const auto& p : prompts) {
            auto seq = p;
            const auto it = answers.find(p);
            if (it != answers.end()) seq.insert(seq.end(), it->second.begin(), it->second.end());
            seq.push_back(data::Vocab::kEos);
            out.push_back(std::move(seq));
        }
        return out;
    };
}

std::string eval_csv(std::span<const EvalResult> results) {
    std::string out = "src,tgt,exact,token_acc,bleu,otr,n\n";
    for (const auto& r : results) {
        out += std::to_string(r.src) + "," + std::to_string(r.tgt) + "," + fmt(r.exact_match) + "," +
               fmt(r.token_accuracy) + "," + fmt(r.bleu) + "," + fmt(r.otr) + "," + std::to_string(r.n) + "\n";
    }
    return out;
}

nlohmann::ordered_json eval_json(std::span<const EvalResult> results) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : results) {
        arr.push_back(nlohmann::ordered_json{{"src", r.src},
                                             {"tgt", r.tgt},
                                             {"exact", r.exact_match},
                                             {"token_acc", r.token_accuracy},
                                             {"bleu", r.bleu},
                                             {"otr", r.otr},
                                             {"n", r.n}});
    }
    return nlohmann::ordered_json{{"directions", arr}};
}

}  // namespace axlab::metrics
