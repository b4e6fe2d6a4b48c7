#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "axlab/errors.hpp"
#include "axlab/metrics.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

namespace mt = axlab::metrics;
namespace d = axlab::data;
using Corpus = std::vector<std::vector<int>>;

namespace {

Corpus random_corpus(axlab::Rng& rng, int n, int alphabet, int max_len, bool allow_empty) {
    Corpus out;
    for (int i = 0; i < n; ++i) {
        const int len = rng.uniform_int(allow_empty ? 0 : 1, max_len);
        std::vector<int> s;
        for (int k = 0; k < len; ++k) s.push_back(3 + rng.uniform_int(0, alphabet - 1));
        out.push_back(std::move(s));
    }
    return out;
}

double token_accuracy_oracle(const Corpus& h, const Corpus& r) {
    double hits = 0, total = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        const auto longer = std::max(h[i].size(), r[i].size());
        for (std::size_t k = 0; k < std::min(h[i].size(), r[i].size()); ++k) hits += h[i][k] == r[i][k] ? 1 : 0;
        total += static_cast<double>(longer);
    }
    return total == 0 ? 0.0 : hits / total;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("exact match counting and EOS stripping") {
    const Corpus refs{{3, 4}, {5}, {6, 7, 8}, {9}, {10}};
    Corpus hyps{{3, 4}, {5, 1, 9}, {6, 7}, {4}, {11}};
    CHECK(mt::exact_match(hyps, refs) == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(mt::exact_match(refs, refs) == 1.0);
    const Corpus wrong{{4}, {4}, {4}, {4}, {4}};
    CHECK(mt::exact_match(wrong, refs) == 0.0);
    CHECK(mt::strip_eos(std::vector<int>{5, 1, 9}) == std::vector<int>{5});
    CHECK(mt::strip_eos(std::vector<int>{1}).empty());
    const Corpus short_refs{{3}};
    CHECK_THROWS_AS(mt::exact_match(hyps, short_refs), axlab::DataError);
    CHECK_THROWS_AS(mt::exact_match(Corpus{}, Corpus{}), axlab::DataError);
}

TEST_CASE("hand-computed BLEU for a repeated-token hypothesis") {
    const Corpus h{{3, 3, 3, 3}}, r{{3, 4}};
    // p1 = 1/4 (clipped); p2..p4 are zero and smoothed to 1/(2*3), 1/(2*2), 1/(2*1); BP = 1.
    const double want = std::pow(0.25 * (1.0 / 6.0) * 0.25 * 0.5, 0.25);
    CHECK(mt::corpus_bleu(h, r) == doctest::Approx(want).epsilon(1e-12));
    CHECK(oracle::bleu(h, r) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("BLEU identity, disjoint and brevity cases") {
    axlab::Rng rng(1);
    for (int t = 0; t < 10; ++t) {
        const auto h = random_corpus(rng, 7, 5, 9, false);
        CHECK(mt::corpus_bleu(h, h) == 1.0);
    }
    const Corpus h{{3, 4, 5, 6}}, disjoint{{7, 8, 9, 10}};
    // Every order is smoothed: p_n = 1/(2 * (5 - n)).
    const double floor = std::pow((1.0 / 8) * (1.0 / 6) * (1.0 / 4) * (1.0 / 2), 0.25);
    CHECK(mt::corpus_bleu(h, disjoint) == doctest::Approx(floor).epsilon(1e-12));
    // Short hypothesis: BP = exp(1 - 4/2).
    const Corpus shorter{{3, 4}};
    CHECK(mt::corpus_bleu(shorter, h) == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    const Corpus empty{{}};
    CHECK(mt::corpus_bleu(empty, h) == 0.0);
    CHECK_THROWS_AS(mt::corpus_bleu(Corpus{}, Corpus{}), axlab::DataError);
    CHECK_THROWS_AS(mt::corpus_bleu(h, Corpus{{3}, {4}}), axlab::DataError);
}

TEST_CASE("metrics agree with brute-force oracles on 50 random corpora") {
    axlab::Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const int n = rng.uniform_int(1, 12);
        const auto refs = random_corpus(rng, n, 4, 10, false);
        auto hyps = random_corpus(rng, n, 4, 10, true);
        // Some hypotheses copied or lightly edited so all precisions are exercised.
        for (int i = 0; i < n; ++i) {
            if (rng.uniform01() < 0.3) hyps[i] = refs[i];
            if (rng.uniform01() < 0.2 && !hyps[i].empty()) hyps[i].pop_back();
        }
        CHECK(std::abs(mt::corpus_bleu(hyps, refs) - oracle::bleu(hyps, refs)) <= 1e-9);
        CHECK(std::abs(mt::corpus_bleu(hyps, refs, 2) - oracle::bleu(hyps, refs, 2)) <= 1e-9);
        CHECK(std::abs(mt::exact_match(hyps, refs) - oracle::exact_match(hyps, refs)) <= 1e-9);
        CHECK(std::abs(mt::token_accuracy(hyps, refs) - token_accuracy_oracle(hyps, refs)) <= 1e-9);
    }
}

TEST_CASE("BLEU is invariant to permuting sentence pairs") {
    axlab::Rng rng(3);
    auto refs = random_corpus(rng, 9, 4, 8, false);
    auto hyps = random_corpus(rng, 9, 4, 8, true);
    const double base = mt::corpus_bleu(hyps, refs);
    std::vector<std::size_t> order(9);
    for (std::size_t i = 0; i < 9; ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    Corpus h2, r2;
    for (auto i : order) {
        h2.push_back(hyps[i]);
        r2.push_back(refs[i]);
    }
    CHECK(mt::corpus_bleu(h2, r2) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("reference outputs score perfectly") {
    auto specs = d::gen_languages(3, 4);
    d::Vocab v(3, d::kDefaultBaseVocab);
    const auto eval = d::build_eval(specs, 5, 4, {});
    const auto gen = mt::reference_generator(eval);
    const auto responses = axlab::probes::generate_responses(eval, gen);
    const auto res = mt::evaluate_responses(eval, responses, v);
    CHECK(res.size() == 6);
    for (const auto& r : res) {
        CHECK(r.exact_match == 1.0);
        CHECK(r.bleu == 1.0);
        CHECK(r.token_accuracy == 1.0);
        CHECK(r.otr == 0.0);
        CHECK(r.n == 5);
    }
    CHECK(mt::pooled_exact_match(std::span<const mt::EvalResult>(res), [](const auto&) { return true; }) == 1.0);
    const auto csv = mt::eval_csv(res);
    CHECK(csv.rfind("src,tgt,exact,token_acc,bleu,otr,n\n", 0) == 0);
    CHECK(mt::eval_json(res).at("directions").size() == 6);
}

TEST_CASE("an untrained model almost never produces an exact translation") {
    auto specs = d::gen_languages(4, 5);
    d::Vocab v(4, d::kDefaultBaseVocab);
    auto cfg = axlab::model::ModelConfig::desk_default(v.size());
    const auto params = axlab::model::init_params(cfg, 5);
    const auto eval = d::build_eval(specs, 42, 5, {});  // 12 directions x 42 = 504
    const auto a = mt::evaluate(params, cfg, eval, v);
    const auto b = mt::evaluate(params, cfg, eval, v);
    CHECK(mt::eval_csv(a) == mt::eval_csv(b));
    const double em = mt::pooled_exact_match(std::span<const mt::EvalResult>(a), [](const auto&) { return true; });
    CHECK(em < 0.01);
    for (const auto& r : a) {
        CHECK(r.bleu >= 0.0);
        CHECK(r.bleu <= 1.0);
        CHECK(r.token_accuracy <= 1.0);
    }
}

}
