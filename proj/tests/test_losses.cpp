#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"

#include "axlab/errors.hpp"
#include "axlab/losses.hpp"
#include "gradcheck_suite.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

namespace L = axlab::losses;
namespace ad = axlab::ad;
namespace m = axlab::model;
using axlab::Tensor;
using Tape = ad::Tape<double>;
using V = ad::Var<double>;

namespace {

std::vector<V> rows_of(Tape& t, const std::vector<std::vector<double>>& rows) {
    std::vector<V> out;
    for (const auto& r : rows) out.push_back(t.constant(Tensor<double>({int(r.size())}, r)));
    return out;
}

double ctr(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& c, double tau) {
    Tape t;
    auto av = rows_of(t, a), cv = rows_of(t, c);
    return L::ctr_loss<double>(av, cv, tau).value().item();
}

// Independent InfoNCE: explicit cosines and log-sum-exp.
double ctr_oracle(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& c, double tau) {
    auto cosine = [](const std::vector<double>& u, const std::vector<double>& v) {
        double uv = 0, uu = 0, vv = 0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            uv += u[i] * v[i];
            uu += u[i] * u[i];
            vv += v[i] * v[i];
        }
        return uv / std::sqrt(uu * vv);
    };
    double total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        std::vector<double> s;
        for (const auto& cj : c) s.push_back(cosine(a[i], cj) / tau);
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0;
        for (double v : s) z += std::exp(v - mx);
        total += -(s[i] - mx - std::log(z));
    }
    return total / a.size();
}

std::vector<std::vector<double>> random_rows(int n, int d, std::uint64_t seed) {
    auto t = testing::random_tensor<double>({n, d}, seed);
    std::vector<std::vector<double>> out(n, std::vector<double>(d));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[i][j] = t.at(i, j);
    return out;
}

L::ClassifierParams<double> zero_classifier(int d) {
    L::ClassifierParams<double> c;
    c.w1 = Tensor<double>::zeros({2 * d, L::kClassifierHidden});
    c.b1 = Tensor<double>::zeros({L::kClassifierHidden});
    c.w2 = Tensor<double>::zeros({L::kClassifierHidden, 2});
    c.b2 = Tensor<double>::zeros({2});
    return c;
}

// Hand-written replay of the documented pair draw order.
std::vector<L::LamPair> replay_pairs(const std::vector<int>& langs, int count, std::uint64_t seed) {
    axlab::Rng rng(seed);
    const int n = static_cast<int>(langs.size());
    std::vector<int> can_match, can_mismatch;
    for (int i = 0; i < n; ++i) {
        int same = 0, other = 0;
        for (int j = 0; j < n; ++j) {
            if (j != i) (langs[j] == langs[i] ? same : other)++;
        }
        if (same) can_match.push_back(i);
        if (other) can_mismatch.push_back(i);
    }
    std::vector<L::LamPair> out;
    auto pick = [&](const std::vector<int>& from) { return from[rng.uniform_below(from.size())]; };
    for (int label : {1, 0}) {
        const int want = label == 1 ? (count + 1) / 2 : count / 2;
        for (int k = 0; k < want; ++k) {
            const int a = pick(label == 1 ? can_match : can_mismatch);
            std::vector<int> opts;
            for (int j = 0; j < n; ++j)
                if (j != a && (langs[j] == langs[a]) == (label == 1)) opts.push_back(j);
            out.push_back({a, pick(opts), label});
        }
    }
    return out;
}

axlab::data::InstructionExample hand_example(std::vector<int> tokens, axlab::data::Span src, axlab::data::Span tgt,
                                             int sl, int tl) {
    axlab::data::InstructionExample ex;
    ex.tokens = std::move(tokens);
    ex.src_span = src;
    ex.tgt_span = tgt;
    ex.src_lang = sl;
    ex.tgt_lang = tl;
    return ex;
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("weights validate") {
    L::LossWeights w;
    CHECK(w.alpha1 == 0.3);
    CHECK(w.alpha2 == 0.4);
    CHECK(w.tau == 0.1);
    w.tau = 0;
    CHECK_THROWS_AS(w.validate(), axlab::ConfigError);
    w = {};
    w.alpha1 = -1;
    CHECK_THROWS_AS(w.validate(), axlab::ConfigError);
}

TEST_CASE("ctr_loss closed forms") {
    CHECK(ctr({{1, 2}}, {{-3, 0.5}}, 0.1) == 0.0);
    std::vector<std::vector<double>> same(4, {0.2, -1, 3});
    CHECK(std::abs(ctr(same, same, 0.1) - std::log(4.0)) <= 1e-6);
    const double v = ctr({{1, 0}, {0, 1}}, {{1, 0}, {0, 1}}, 0.1);
    CHECK(v == doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-9));
    CHECK(v == doctest::Approx(4.5399e-5).epsilon(1e-4));
}

TEST_CASE("ctr_loss matches an explicit InfoNCE and is non-negative") {
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto a = random_rows(6, 5, 2 * s), c = random_rows(6, 5, 2 * s + 1);
        const double got = ctr(a, c, 0.1);
        CHECK(got >= 0.0);
        CHECK(std::abs(got - ctr_oracle(a, c, 0.1)) <= 1e-9);
    }
}

TEST_CASE("ctr_loss scale and permutation invariance") {
    auto a = random_rows(5, 4, 1), c = random_rows(5, 4, 2);
    const double base = ctr(a, c, 0.1);
    auto as = a;
    for (auto& v : as[2]) v *= 17.0;
    auto cs = c;
    for (auto& v : cs[0]) v *= 0.05;
    CHECK(std::abs(ctr(as, cs, 0.1) - base) <= 1e-6);
    std::vector<int> perm{3, 0, 4, 1, 2};
    std::vector<std::vector<double>> ap, cp;
    for (int i : perm) {
        ap.push_back(a[i]);
        cp.push_back(c[i]);
    }
    CHECK(std::abs(ctr(ap, cp, 0.1) - base) <= 1e-6);
}

TEST_CASE("ctr_loss errors") {
    Tape t;
    std::vector<V> none;
    CHECK_THROWS_AS(L::ctr_loss<double>(none, none, 0.1), axlab::DimensionError);
    auto a = rows_of(t, {{1, 0}}), c = rows_of(t, {{1, 0}, {0, 1}});
    CHECK_THROWS_AS(L::ctr_loss<double>(a, c, 0.1), axlab::DimensionError);
    auto z = rows_of(t, {{0, 0}});
    CHECK_THROWS_AS(L::ctr_loss<double>(a, z, 0.1), axlab::DegenerateVectorError);
}

TEST_CASE("lam_pairs labels and balance") {
    std::vector<int> langs{0, 1, 0, 2, 0, 3, 0, 1};
    axlab::Rng rng(9);
    auto p = L::lam_pairs(langs, 8, rng);
    CHECK(p.balanced);
    CHECK(p.pairs.size() == 8);
    int matched = 0;
    for (const auto& pr : p.pairs) {
        CHECK(pr.a != pr.b);
        CHECK(pr.label == (langs[pr.a] == langs[pr.b] ? 1 : 0));
        matched += pr.label;
    }
    CHECK(matched == 4);
    axlab::Rng odd(3);
    auto q = L::lam_pairs(langs, 7, odd);
    int m7 = 0;
    for (const auto& pr : q.pairs) m7 += pr.label;
    CHECK(m7 == 4);
}

TEST_CASE("lam_pairs replays exactly from a fixed seed") {
    // An 8-example batch: source (pivot) and target reps interleaved.
    std::vector<int> langs{0, 1, 0, 2, 0, 3, 1, 0, 2, 0, 3, 0, 0, 1, 0, 2};
    for (std::uint64_t seed : {1ULL, 2ULL, 99ULL}) {
        axlab::Rng rng(seed);
        auto got = L::lam_pairs(langs, 8, rng);
        auto want = replay_pairs(langs, 8, seed);
        REQUIRE(got.pairs.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i) {
            CHECK(got.pairs[i].a == want[i].a);
            CHECK(got.pairs[i].b == want[i].b);
            CHECK(got.pairs[i].label == want[i].label);
        }
    }
}

TEST_CASE("lam_pairs falls back when the batch cannot balance") {
    std::vector<int> one_lang{2, 2, 2};
    axlab::Rng rng(1);
    auto p = L::lam_pairs(one_lang, 4, rng);
    CHECK_FALSE(p.balanced);
    for (const auto& pr : p.pairs) CHECK(pr.label == 1);
    std::vector<int> all_distinct{0, 1, 2};
    auto q = L::lam_pairs(all_distinct, 4, rng);
    CHECK_FALSE(q.balanced);
    for (const auto& pr : q.pairs) CHECK(pr.label == 0);
    std::vector<int> single{0};
    CHECK_THROWS_AS(L::lam_pairs(single, 2, rng), axlab::DimensionError);
}

TEST_CASE("lam_loss closed forms") {
    Tape t;
    auto pool = rows_of(t, random_rows(6, 3, 4));
    auto cls = L::bind_classifier(t, zero_classifier(3), false);
    std::vector<L::LamPair> pairs{{0, 1, 1}, {2, 3, 0}, {4, 5, 1}, {1, 4, 0}};
    CHECK(std::abs(L::lam_loss<double>(pool, pairs, cls).value().item() - std::log(2.0)) <= 1e-6);
    std::vector<L::LamPair> all_matched{{0, 1, 1}, {0, 2, 1}};
    CHECK(std::abs(L::lam_loss<double>(pool, all_matched, cls).value().item() - std::log(2.0)) <= 1e-6);

    auto sure = zero_classifier(3);
    sure.b2[1] = 60.0;
    auto sv = L::bind_classifier(t, sure, false);
    CHECK(L::lam_loss<double>(pool, all_matched, sv).value().item() < 1e-20);
    std::vector<L::LamPair> bad{{0, 9, 1}};
    CHECK_THROWS_AS(L::lam_loss<double>(pool, bad, cls), axlab::IndexError);
}

TEST_CASE("lam_loss matches a hand-propagated MLP at d_model 2") {
    auto c = zero_classifier(2);
    // hidden0 = relu(a0 - b1 + 0.5), hidden1 = relu(2 a1 + b0 - 1), logits = [h0 - h1, 0.5 h1 + 0.25]
    c.w1.at(0, 0) = 1;
    c.w1.at(3, 0) = -1;
    c.b1[0] = 0.5;
    c.w1.at(1, 1) = 2;
    c.w1.at(2, 1) = 1;
    c.b1[1] = -1;
    c.w2.at(0, 0) = 1;
    c.w2.at(1, 0) = -1;
    c.w2.at(1, 1) = 0.5;
    c.b2[1] = 0.25;
    Tape t;
    auto pool = rows_of(t, {{0.3, 1.2}, {-0.4, 0.7}});
    auto cls = L::bind_classifier(t, c, false);
    std::vector<L::LamPair> pairs{{0, 1, 1}};
    const double h0 = std::max(0.0, 0.3 - 0.7 + 0.5), h1 = std::max(0.0, 2 * 1.2 - 0.4 - 1);
    const double z0 = h0 - h1, z1 = 0.5 * h1 + 0.25;
    const double want = -(z1 - std::log(std::exp(z0) + std::exp(z1)));
    CHECK(L::lam_loss<double>(pool, pairs, cls).value().item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("ntp_loss closed forms") {
    Tape t;
    std::vector<int> toks{3, 7, 1, 30};
    CHECK(L::ntp_loss(t.constant(Tensor<double>({4, 32}, 0.0)), std::span<const int>(toks)).value().item() ==
          doctest::Approx(std::log(32.0)).epsilon(1e-12));
    Tensor<double> sure({4, 32}, 0.0);
    for (int j = 0; j < 3; ++j) sure.at(j, toks[j + 1]) = 1e4;
    CHECK(L::ntp_loss(t.constant(sure), std::span<const int>(toks)).value().item() == doctest::Approx(0.0));
    // 3 tokens, vocab 3: positions 0 and 1 predict tokens 2 and 0.
    auto logits = Tensor<double>::matrix({{0, 1, 2}, {1, 0, 0}, {5, 5, 5}});
    std::vector<int> three{1, 2, 0};
    auto lse = [](double a, double b, double c) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)); };
    const double want = 0.5 * ((lse(0, 1, 2) - 2) + (lse(1, 0, 0) - 1));
    CHECK(L::ntp_loss(t.constant(logits), std::span<const int>(three)).value().item() ==
          doctest::Approx(want).epsilon(1e-12));
    std::vector<int> one{3};
    CHECK_THROWS_AS(L::ntp_loss(t.constant(Tensor<double>({1, 32}, 0.0)), std::span<const int>(one)), axlab::InputError);
}

TEST_CASE("ntp_loss_batch averages per-sequence means") {
    Tape t;
    std::vector<std::vector<int>> seqs{{1, 2, 3}, {4, 5}};
    auto batch = m::PackedBatch::pack(seqs);
    auto logits = testing::random_tensor<double>({5, 8}, 12);
    const double got = L::ntp_loss_batch(t.constant(logits), batch).value().item();
    auto a = L::ntp_loss(t.constant(Tensor<double>({3, 8}, std::vector<double>(logits.storage().begin(), logits.storage().begin() + 24))),
                         std::span<const int>(seqs[0]))
                 .value()
                 .item();
    auto b = L::ntp_loss(t.constant(Tensor<double>({2, 8}, std::vector<double>(logits.storage().begin() + 24, logits.storage().end()))),
                         std::span<const int>(seqs[1]))
                 .value()
                 .item();
    CHECK(got == doctest::Approx((a + b) / 2).epsilon(1e-12));
}

TEST_CASE("combined loss arithmetic") {
    L::LossWeights w;
    CHECK(L::combined_value(1.0, 0.5, 0.25, w) == doctest::Approx(1.25).epsilon(1e-12));
    CHECK(L::combined_value(0, 0, 0, w) == 0.0);
    L::LossWeights off{0, 0, 0.1};
    CHECK(L::combined_value(2.5, 9, 9, off) == 2.5);
    // Linear in each component with coefficients (1, alpha1, alpha2).
    const double base = L::combined_value(1, 1, 1, w);
    CHECK(L::combined_value(2, 1, 1, w) - base == doctest::Approx(1.0));
    CHECK(L::combined_value(1, 2, 1, w) - base == doctest::Approx(0.3));
    CHECK(L::combined_value(1, 1, 2, w) - base == doctest::Approx(0.4));
    Tape t;
    auto v = L::combined_loss(t.constant(Tensor<double>::scalar(1.0)), t.constant(Tensor<double>::scalar(0.5)),
                              t.constant(Tensor<double>::scalar(0.25)), w);
    CHECK(std::abs(v.value().item() - 1.25) <= 1e-6);
    auto only = L::combined_loss(t.constant(Tensor<double>::scalar(1.5)), V{}, V{}, w);
    CHECK(only.value().item() == 1.5);
}

TEST_CASE("combined loss names the non-finite component") {
    L::LossWeights w;
    auto message = [&](double a, double b, double c) {
        try {
            L::combined_value(a, b, c, w);
        } catch (const axlab::DivergenceError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message(NAN, 0, 0).find("ntp") != std::string::npos);
    CHECK(message(0, INFINITY, 0).find("ctr") != std::string::npos);
    CHECK(message(0, 0, NAN).find("lam") != std::string::npos);
    Tape t;
    CHECK_THROWS_AS(L::combined_loss(t.constant(Tensor<double>::scalar(1)), t.constant(Tensor<double>::scalar(NAN)), V{}, w),
                    axlab::DivergenceError);
}

TEST_CASE("extract_reps pools the recorded spans") {
    auto cfg = testing::tiny_config(11);
    auto p = m::cast_params<double>(m::init_params(cfg, 3));
    std::vector<std::vector<int>> seqs{{0, 3, 4, 5, 2, 6, 7, 8, 1}, {0, 9, 2, 10, 1}};
    auto batch = m::PackedBatch::pack(seqs);
    Tape t;
    auto vars = m::bind(t, p, false);
    auto tr = m::forward_batch(vars, cfg, batch);
    auto ex = hand_example(seqs[0], {1, 4}, {5, 8}, 0, 2);
    auto [src, tgt] = L::extract_reps(tr, batch, 0, ex, 1);
    const auto& h = tr.hidden[1].value();
    for (int c = 0; c < cfg.d_model; ++c) {
        CHECK(src.vector.value()[c] == doctest::Approx((h.at(1, c) + h.at(2, c) + h.at(3, c)) / 3).epsilon(1e-14));
        CHECK(tgt.vector.value()[c] == doctest::Approx((h.at(5, c) + h.at(6, c) + h.at(7, c)) / 3).epsilon(1e-14));
    }
    CHECK(src.lang == 0);
    CHECK(tgt.lang == 2);
    CHECK(src.role == L::SpanRole::source);
    auto one = hand_example(seqs[1], {1, 2}, {3, 4}, 0, 1);
    auto [s1, t1] = L::extract_reps(tr, batch, 1, one, 2);
    for (int c = 0; c < cfg.d_model; ++c) {
        CHECK(s1.vector.value()[c] == tr.hidden[2].value().at(10, c));
        CHECK(t1.vector.value()[c] == tr.hidden[2].value().at(12, c));
    }
    auto bad = hand_example(seqs[1], {1, 2}, {3, 6}, 0, 1);
    CHECK_THROWS_AS(L::extract_reps(tr, batch, 1, bad, 1), axlab::InvalidSpanError);
    CHECK_THROWS_AS(L::extract_reps(tr, batch, 1, one, 3), axlab::IndexError);
}

TEST_CASE("combined loss gradient reaches every backbone and classifier parameter") {
    const gradcheck::CombinedProblem prob;
    const auto& cfg = prob.cfg;
    const auto& inputs = prob.inputs;
    const auto& exs = prob.examples;
    auto r = prob.check();
    INFO("rel err " << r.rel_error << " over " << r.n_checked << " parameters");
    CHECK(r.rel_error <= 1e-3);

    // Each auxiliary head on its own moves the backbone.
    auto vars_only = [&](double a1, double a2) {
        Tape tt;
        std::vector<V> lv;
        for (const auto& in : inputs) lv.push_back(tt.leaf(in));
        m::ModelVars<double> vars;
        vars.layers.resize(cfg.n_layers);
        L::ClassifierVars<double> cv;
        std::size_t i = 0;
        vars.visit([&](const std::string&, V& v) { v = lv[i++]; });
        cv.visit([&](const std::string&, V& v) { v = lv[i++]; });
        std::vector<std::vector<int>> seqs;
        for (const auto& e : exs) seqs.push_back(e.tokens);
        auto batch = m::PackedBatch::pack(seqs);
        auto tr = m::forward_batch(vars, cfg, batch);
        std::vector<V> anchors, cands, pool;
        for (int k = 0; k < 3; ++k) {
            auto [a, c] = L::extract_reps(tr, batch, k, exs[k], cfg.align_layer);
            anchors.push_back(a.vector);
            cands.push_back(c.vector);
            auto [fa, fc] = L::extract_reps(tr, batch, k, exs[k], cfg.n_layers);
            pool.push_back(fa.vector);
            pool.push_back(fc.vector);
        }
        std::vector<L::LamPair> pairs{{0, 4, 1}, {1, 2, 0}};
        auto zero = tt.constant(Tensor<double>::scalar(0.0));
        auto total = L::combined_loss(zero, L::ctr_loss<double>(anchors, cands, 0.1),
                                      L::lam_loss<double>(pool, pairs, cv), L::LossWeights{a1, a2, 0.1});
        tt.backward(total);
        double g = 0;
        for (auto& x : lv[2].grad().storage()) g += std::abs(x);  // layer0.ln1.gain
        return g;
    };
    CHECK(vars_only(0.3, 0.0) > 0.0);
    CHECK(vars_only(0.0, 0.4) > 0.0);
}

}
