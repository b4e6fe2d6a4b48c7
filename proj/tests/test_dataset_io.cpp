#include "doctest.h"

#include "axlab/dataset_io.hpp"
#include "axlab/errors.hpp"
#include "helpers.hpp"

namespace d = axlab::data;

namespace {

d::DataBundle bundle_for(const std::vector<d::ToyLanguageSpec>& specs, const d::Dataset& ds, std::uint64_t seed) {
    d::DataBundle b;
    b.seed = seed;
    b.languages = specs;
    b.files["stage1.jsonl"] = d::summarize(ds, 1, seed, static_cast<int>(specs.size()));
    return b;
}

}  // namespace

TEST_SUITE("dataset_io") {

TEST_CASE("example JSON uses the documented keys") {
    auto specs = d::gen_languages(3, 1);
    d::Vocab v(3, 64);
    auto ex = d::build_instruction(specs[0].render(d::random_meaning(1)), specs[2].render(d::random_meaning(1)), 4, 0,
                                   2, v);
    auto j = d::example_to_json(ex);
    CHECK(j.at("tokens").get<std::vector<int>>() == ex.tokens);
    CHECK(j.at("src_span") == nlohmann::json::array({ex.src_span.start, ex.src_span.end}));
    CHECK(j.at("tgt_span") == nlohmann::json::array({ex.tgt_span.start, ex.tgt_span.end}));
    CHECK(j.at("src_lang") == 0);
    CHECK(j.at("tgt_lang") == 2);
    CHECK(j.at("template_id") == 4);
    CHECK(j.at("kind") == "translation");
    CHECK(d::example_from_json(j) == ex);
    auto broken = j;
    broken["kind"] = "poetry";
    CHECK_THROWS_AS(d::example_from_json(broken), axlab::DataError);
    broken = j;
    broken["src_span"] = nlohmann::json::array({1});
    CHECK_THROWS_AS(d::example_from_json(broken), axlab::DataError);
}

TEST_CASE("jsonl round trip is byte-stable") {
    testing::TempDir dir("io");
    auto specs = d::gen_languages(3, 2);
    auto ds = d::build_stage1(specs, 10, 5);
    auto s2 = d::build_stage2(specs, 40, 5);
    ds.insert(ds.end(), s2.begin(), s2.end());
    d::write_jsonl(dir / "a.jsonl", ds);
    auto back = d::read_jsonl(dir / "a.jsonl");
    CHECK(back == ds);
    d::write_jsonl(dir / "b.jsonl", back);
    CHECK(testing::slurp(dir / "a.jsonl") == testing::slurp(dir / "b.jsonl"));
}

TEST_CASE("malformed lines report their line number") {
    testing::TempDir dir("io");
    d::write_text(dir / "bad.jsonl", "{\"tokens\":[0,1]}\nnot json\n");
    try {
        d::read_jsonl(dir / "bad.jsonl");
        FAIL("expected an error");
    } catch (const axlab::DataError& e) {
        CHECK(std::string(e.what()).find(":1:") != std::string::npos);
    }
    CHECK_THROWS_AS(d::read_jsonl(dir / "missing.jsonl"), axlab::IoError);
}

TEST_CASE("manifest round trip and version check") {
    auto specs = d::gen_languages(4, 2);
    auto ds = d::build_stage2(specs, 300, 1);
    auto m = d::summarize(ds, 2, 1, 4);
    auto j = d::manifest_to_json(m);
    CHECK(d::manifest_from_json(j) == m);
    j["format_version"] = 2;
    CHECK_THROWS_AS(d::manifest_from_json(j), axlab::DataError);
}

TEST_CASE("load_dataset reconciles counts and validates examples") {
    testing::TempDir dir("io");
    auto specs = d::gen_languages(3, 4);
    auto ds = d::build_stage1(specs, 6, 4);
    d::write_jsonl(dir / "stage1.jsonl", ds);
    d::write_bundle(dir / "manifest.json", bundle_for(specs, ds, 4));
    auto loaded = d::load_dataset(dir / "stage1.jsonl");
    CHECK(loaded.data == ds);
    CHECK(loaded.specs.size() == 3);
    CHECK(loaded.specs[1].cipher == specs[1].cipher);
    CHECK(loaded.manifest.total() == 24);

    // Dropping a line breaks reconciliation.
    auto fewer = ds;
    fewer.pop_back();
    d::write_jsonl(dir / "stage1.jsonl", fewer);
    CHECK_THROWS_AS(d::load_dataset(dir / "stage1.jsonl"), axlab::DataError);

    // A span that covers a template token is rejected.
    auto shifted = ds;
    shifted[0].src_span.start -= 1;
    d::write_jsonl(dir / "stage1.jsonl", shifted);
    CHECK_THROWS_AS(d::load_dataset(dir / "stage1.jsonl"), axlab::DataError);

    CHECK_THROWS_AS(d::load_dataset(dir / "nope.jsonl"), axlab::IoError);
}

TEST_CASE("bundle rejects a cipher that is not a bijection") {
    testing::TempDir dir("io");
    auto specs = d::gen_languages(3, 4);
    auto ds = d::build_stage1(specs, 2, 4);
    auto b = bundle_for(specs, ds, 4);
    b.languages[1].cipher[0] = b.languages[1].cipher[1];
    d::write_bundle(dir / "manifest.json", b);
    CHECK_THROWS_AS(d::read_bundle(dir / "manifest.json"), axlab::DataError);
}

TEST_CASE("bundle round trip") {
    testing::TempDir dir("io");
    auto specs = d::gen_languages(5, 4);
    auto ds = d::build_stage1(specs, 2, 4);
    auto b = bundle_for(specs, ds, 4);
    d::write_bundle(dir / "manifest.json", b);
    auto r = d::read_bundle(dir / "manifest.json");
    CHECK(r.seed == 4);
    CHECK(r.base_vocab == 64);
    REQUIRE(r.languages.size() == 5);
    for (int l = 0; l < 5; ++l) {
        CHECK(r.languages[l].cipher == specs[l].cipher);
        CHECK(r.languages[l].inverse == specs[l].inverse);
        CHECK(r.languages[l].word_order == specs[l].word_order);
        CHECK(r.languages[l].script_offset == specs[l].script_offset);
    }
    CHECK(r.files.at("stage1.jsonl") == b.files.at("stage1.jsonl"));
}

}
