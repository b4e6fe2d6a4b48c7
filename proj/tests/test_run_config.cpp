#include "doctest.h"

#include "axlab/dataset_io.hpp"
#include "axlab/errors.hpp"
#include "axlab/run_config.hpp"
#include "helpers.hpp"

namespace cfg = axlab::config;
using nlohmann::json;

TEST_SUITE("run_config") {

TEST_CASE("defaults") {
    const cfg::RunConfig c;
    CHECK(c.seed == 0);
    CHECK(c.languages.n_langs == 4);
    CHECK(c.languages.base_vocab == 64);
    CHECK(c.languages.n_per_direction == 2000);
    CHECK(c.model.align_layer == 2);
    CHECK(c.train_stage1.alpha1 == 0.3);
    CHECK(c.train_stage1.alpha2 == 0.4);
    CHECK(c.train_stage1.tau == 0.1);
    CHECK(c.train_stage1.epochs == 2);
    CHECK(c.train_stage1.batch_size == 128);
    CHECK(c.eval.max_new_tokens == 16);
    const auto t = c.train_stage1.to_train(1, 5);
    CHECK(t.seed == 5);
    CHECK(t.weights.alpha1 == 0.3);
    CHECK(t.adam.weight_decay == 0.01);
    const auto m = c.model.to_model(100);
    CHECK(m.vocab_size == 100);
    CHECK(m.d_model == 64);
}

TEST_CASE("partial documents override only what they name") {
    const auto c = cfg::RunConfig::from_json(json::parse(R"({
        "seed": 9,
        "model": {"d_model": 32},
        "train_stage1": {"learning_rate": 0.002, "disable_lam": true},
        "train_stage2": {"epochs": 3}
    })"));
    CHECK(c.seed == 9);
    CHECK(c.model.d_model == 32);
    CHECK(c.model.n_layers == 4);
    CHECK(c.train_stage1.learning_rate == 0.002);
    CHECK(c.train_stage1.disable_lam);
    CHECK(c.train_stage1.alpha1 == 0.3);
    CHECK(c.train_stage2.epochs == 3);
    CHECK(c.train_stage1.epochs == 2);
}

TEST_CASE("to_json round trips") {
    auto c = cfg::RunConfig::from_json(json::parse(R"({"seed": 3, "probes": {"n_sentences": 7}})"));
    const auto j = c.to_json();
    const auto back = cfg::RunConfig::from_json(json::parse(j.dump()));
    CHECK(back.to_json() == j);
    CHECK(back.probes.n_sentences == 7);
}

TEST_CASE("strict parsing rejects unknown keys and wrong types") {
    const char* bad[] = {
        R"({"sed": 1})",
        R"({"languages": {"n_lang": 3}})",
        R"({"train_stage2": {"alpha1": 0.3}})",
        R"({"model": {"d_model": 32.5}})",
        R"({"model": {"d_model": "32"}})",
        R"({"train_stage1": {"disable_ctr": 1}})",
        R"({"train_stage1": {"learning_rate": "fast"}})",
        R"({"eval": []})",
        R"([])",
    };
    for (const char* text : bad) {
        CAPTURE(text);
        CHECK_THROWS_AS(cfg::RunConfig::from_json(json::parse(text)), axlab::ConfigError);
    }
    // Integers are accepted where a float is expected.
    CHECK(cfg::RunConfig::from_json(json::parse(R"({"train_stage1": {"learning_rate": 1}})")).train_stage1.learning_rate ==
          1.0);
}

TEST_CASE("load reports parse errors and invalid values") {
    testing::TempDir dir("cfg");
    axlab::data::write_text(dir / "broken.json", "{ not json");
    CHECK_THROWS_AS(cfg::RunConfig::load(dir / "broken.json"), axlab::ConfigError);
    CHECK_THROWS_AS(cfg::RunConfig::load(dir / "absent.json"), axlab::IoError);
    axlab::data::write_text(dir / "ok.json", R"({"model": {"align_layer": 9}})");
    const auto c = cfg::RunConfig::load(dir / "ok.json");
    CHECK_THROWS_AS(c.model.to_model(50), axlab::ConfigError);
    cfg::StageSection s;
    s.tau = 0.0;
    CHECK_THROWS_AS(s.to_train(1, 0), axlab::ConfigError);
}

}
