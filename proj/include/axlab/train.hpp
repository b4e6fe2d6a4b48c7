#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "axlab/losses.hpp"
#include "axlab/model.hpp"
#include "axlab/toy_data.hpp"

namespace axlab::train {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// First/second moments for a list of parameters plus the bias-correction step.
struct AdamMoments {
    std::vector<Tensor<float>> m;
    std::vector<Tensor<float>> v;
    std::int64_t t = 0;

    static AdamMoments zeros_like(std::span<const Tensor<float>* const> params);
    bool matches(std::span<const Tensor<float>* const> params) const;
};

/// One decoupled-weight-decay Adam step over parallel lists of parameters and
/// gradients. Throws DivergenceError naming the first parameter with a
/// non-finite gradient; nothing is modified in that case.
void adamw_step(std::span<Tensor<float>* const> params, std::span<const Tensor<float>* const> grads,
                std::span<const std::string> names, AdamMoments& moments, double lr, const AdamConfig& config);

struct Ablations {
    bool disable_ctr = false;
    bool disable_lam = false;
};

struct TrainConfig {
    int stage = 1;
    int epochs = 2;
    int batch_size = 128;
    double learning_rate = 3e-4;
    losses::LossWeights weights;
    std::uint64_t seed = 0;
    Ablations ablations;
    AdamConfig adam;
    bool cosine_decay = false;
    /// Adds the reverse (target-anchored) contrastive term and averages the two.
    bool symmetric_ctr = false;
    /// Stop after this many optimizer steps; <= 0 means no limit.
    std::int64_t max_steps = 0;

    void validate() const;
    /// Weights actually applied: zero in stage 2 and for ablated terms.
    losses::LossWeights effective_weights() const;
};

struct StageRecord {
    int stage = 0;
    std::int64_t first_step = 0;
    std::int64_t last_step = 0;
    std::uint64_t seed = 0;
    bool disable_ctr = false;
    bool disable_lam = false;
    double alpha1 = 0;
    double alpha2 = 0;
    double tau = 0;
    double learning_rate = 0;
    bool operator==(const StageRecord&) const = default;
};

/// Everything a checkpoint holds.
struct TrainState {
    model::ModelConfig model_config;
    model::ModelParams<float> model;
    losses::ClassifierParams<float> classifier;
    AdamMoments model_moments;
    AdamMoments classifier_moments;
    std::int64_t step = 0;
    int stage = 0;  // 0 = fresh initialization
    std::vector<StageRecord> history;
};

/// Fresh parameters from named sub-seeds of `seed` ("init", "classifier").
TrainState initial_state(const model::ModelConfig& config, std::uint64_t seed);

struct LossRecord {
    std::int64_t step = 0;
    double ntp = 0;
    double ctr = 0;
    double lam = 0;
    double combined = 0;
};

struct TrainResult {
    TrainState state;
    std::vector<LossRecord> log;
    int unbalanced_lam_batches = 0;
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Stage 1: NTP + alpha1 CTR (align layer) + alpha2 LAM (final layer).
TrainResult train_stage1(const data::Dataset& dataset, const TrainConfig& config, TrainState state,
                         const ProgressFn& progress = {});
/// Stage 2: NTP only; the classifier is carried through untouched. Optimizer
/// moments are reset when the incoming state comes from another stage.
TrainResult train_stage2(TrainState state, const data::Dataset& dataset, const TrainConfig& config,
                         const ProgressFn& progress = {});

/// "step,ntp,ctr,lam,combined" with 9 significant digits.
std::string loss_csv(std::span<const LossRecord> log);

}  // namespace axlab::train
