#pragma once

// Strict JSON run configuration. Every field has a default; unknown keys and
// wrongly typed values raise ConfigError. Precedence is applied by the CLI:
// flag > file > default.

#include <cstdint>
#include <filesystem>

#include "json.hpp"

#include "axlab/model.hpp"
#include "axlab/train.hpp"

namespace axlab::config {

struct LanguagesSection {
    int n_langs = 4;
    int base_vocab = 64;
    int n_per_direction = 2000;
    int n_eval_per_direction = 50;
};

struct ModelSection {
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 64;
    int align_layer = 2;

    model::ModelConfig to_model(int vocab_size) const;
};

struct StageSection {
    int epochs = 2;
    int batch_size = 128;
    double learning_rate = 3e-4;
    double alpha1 = 0.3;
    double alpha2 = 0.4;
    double tau = 0.1;
    bool disable_ctr = false;
    bool disable_lam = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    bool cosine_decay = false;
    bool symmetric_ctr = false;
    std::int64_t max_steps = 0;

    train::TrainConfig to_train(int stage, std::uint64_t seed) const;
};

struct EvalSection {
    int max_new_tokens = 16;
};

struct ProbesSection {
    int n_sentences = 200;
    int projection_sentences = 50;
    int max_lens_probes = 200;
};

struct RunConfig {
    std::uint64_t seed = 0;
    LanguagesSection languages;
    ModelSection model;
    StageSection train_stage1;
    StageSection train_stage2;
    EvalSection eval;
    ProbesSection probes;

    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::filesystem::path& path);
    nlohmann::ordered_json to_json() const;
};

}  // namespace axlab::config
