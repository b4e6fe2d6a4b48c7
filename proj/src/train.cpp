#include "axlab/train.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>

#include "axlab/errors.hpp"
#include "axlab/rng.hpp"

namespace axlab::train {

namespace {

template <typename W>
std::vector<Tensor<float>*> param_list(W& weights) {
    std::vector<Tensor<float>*> out;
    weights.visit([&](const std::string&, Tensor<float>& t) { out.push_back(&t); });
    return out;
}

template <typename W>
std::vector<const Tensor<float>*> const_param_list(const W& weights) {
    std::vector<const Tensor<float>*> out;
    weights.visit([&](const std::string&, const Tensor<float>& t) { out.push_back(&t); });
    return out;
}

template <typename W>
std::vector<std::string> param_names(const W& weights) {
    std::vector<std::string> out;
    weights.visit([&](const std::string& name, const Tensor<float>&) { out.push_back(name); });
    return out;
}

std::int64_t planned_steps(const TrainConfig& config, std::size_t n) {
    const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
    std::int64_t total = static_cast<std::int64_t>(n / batch) * config.epochs;
    if (config.max_steps > 0) total = std::min(total, config.max_steps);
    return total;
}

TrainResult run(TrainState state, const data::Dataset& dataset, const TrainConfig& config,
                const ProgressFn& progress) {
    config.validate();
    model::check_params(state.model, state.model_config);
    if (dataset.empty()) throw DataError("training dataset is empty");
    const auto& mc = state.model_config;
    const bool stage1 = config.stage == 1;
    const auto eff = config.effective_weights();
    const bool train_classifier = stage1 && eff.alpha2 > 0.0;

    auto model_params = param_list(state.model);
    auto cls_params = param_list(state.classifier);
    const auto model_names = param_names(state.model);
    const auto cls_names = param_names(state.classifier);
    if (state.stage != config.stage || !state.model_moments.matches(model_params)) {
        state.model_moments = AdamMoments::zeros_like(model_params);
        state.classifier_moments = AdamMoments::zeros_like(cls_params);
    }

    TrainResult result;
    StageRecord record{config.stage, state.step + 1, state.step, config.seed, config.ablations.disable_ctr,
                       config.ablations.disable_lam, eff.alpha1, eff.alpha2, config.weights.tau,
                       config.learning_rate};

    const std::size_t n = dataset.size();
    const std::size_t batch_size = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n);
    const std::int64_t total_steps = planned_steps(config, n);
    const auto batching_seed = derive_seed(config.seed, "batching");
    Rng lam_rng(derive_seed(config.seed, "lam-pairs"));
    std::int64_t local_step = 0;

    ad::Tape<float> tape;
    for (int epoch = 0; epoch < config.epochs && local_step < total_steps; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(batching_seed, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        for (std::size_t b0 = 0; b0 + batch_size <= n && local_step < total_steps; b0 += batch_size) {
            const std::int64_t step = state.step + 1;
            tape.reset();
            const auto vars = model::bind(tape, state.model, true);
            const auto cls = losses::bind_classifier(tape, state.classifier, train_classifier);

            std::vector<std::vector<int>> seqs;
            std::vector<const data::InstructionExample*> examples;
            for (std::size_t i = b0; i < b0 + batch_size; ++i) {
                examples.push_back(&dataset[order[i]]);
                seqs.push_back(examples.back()->tokens);
            }
            const auto batch = model::PackedBatch::pack(seqs);
            const auto trace = model::forward_batch(vars, mc, batch);
            const auto ntp = losses::ntp_loss_batch(trace.logits, batch);

            ad::Var<float> ctr, lam;
            if (stage1) {
                std::vector<ad::Var<float>> anchors, candidates, pool;
                std::vector<int> pool_langs;
                for (std::size_t i = 0; i < examples.size(); ++i) {
                    const auto [hx, hy] =
                        losses::extract_reps(trace, batch, static_cast<int>(i), *examples[i], mc.align_layer);
                    anchors.push_back(hx.vector);
                    candidates.push_back(hy.vector);
                    const auto [fx, fy] =
                        losses::extract_reps(trace, batch, static_cast<int>(i), *examples[i], mc.n_layers);
                    pool.push_back(fx.vector);
                    pool_langs.push_back(fx.lang);
                    pool.push_back(fy.vector);
                    pool_langs.push_back(fy.lang);
                }
                const auto tau = static_cast<float>(config.weights.tau);
                ctr = losses::ctr_loss<float>(anchors, candidates, tau);
                if (config.symmetric_ctr) {
                    ctr = ad::scale(ad::add(ctr, losses::ctr_loss<float>(candidates, anchors, tau)), 0.5f);
                }
                const auto pairing = losses::lam_pairs(pool_langs, static_cast<int>(examples.size()), lam_rng);
                if (!pairing.balanced) ++result.unbalanced_lam_batches;
                lam = losses::lam_loss<float>(pool, pairing.pairs, cls);
            }

            ad::Var<float> total;
            try {
                total = losses::combined_loss(ntp, eff.alpha1 > 0.0 ? ctr : ad::Var<float>{},
                                              eff.alpha2 > 0.0 ? lam : ad::Var<float>{}, eff);
            } catch (const DivergenceError& e) {
                throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
            }
            tape.backward(total);

            const auto grads = model::collect_grads(vars);
            const auto grad_ptrs = const_param_list(grads);
            double lr = config.learning_rate;
            if (config.cosine_decay && total_steps > 0) {
                lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(local_step) /
                                            static_cast<double>(total_steps)));
            }
            try {
                adamw_step(model_params, grad_ptrs, model_names, state.model_moments, lr, config.adam);
                if (train_classifier) {
                    const auto cgrads = losses::collect_classifier_grads(cls);
                    const auto cgrad_ptrs = const_param_list(cgrads);
                    adamw_step(cls_params, cgrad_ptrs, cls_names, state.classifier_moments, lr, config.adam);
                }
            } catch (const DivergenceError& e) {
                throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
            }

            LossRecord rec;
            rec.step = step;
            rec.ntp = ntp.value().item();
            rec.ctr = ctr.valid() ? ctr.value().item() : 0.0;
            rec.lam = lam.valid() ? lam.value().item() : 0.0;
            rec.combined = total.value().item();
            result.log.push_back(rec);
            if (progress) progress(rec);
            state.step = step;
            ++local_step;
        }
    }
    record.last_step = state.step;
    state.stage = config.stage;
    state.history.push_back(record);
    result.state = std::move(state);
    return result;
}

}  // namespace

AdamMoments AdamMoments::zeros_like(std::span<const Tensor<float>* const> params) {
    AdamMoments m;
    for (const auto* p : params) {
        m.m.push_back(Tensor<float>::zeros(p->shape()));
        m.v.push_back(Tensor<float>::zeros(p->shape()));
    }
    return m;
}

bool AdamMoments::matches(std::span<const Tensor<float>* const> params) const {
    if (m.size() != params.size() || v.size() != params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (m[i].shape() != params[i]->shape() || v[i].shape() != params[i]->shape()) return false;
    }
    return true;
}

void adamw_step(std::span<Tensor<float>* const> params, std::span<const Tensor<float>* const> grads,
                std::span<const std::string> names, AdamMoments& moments, double lr, const AdamConfig& config) {
    if (params.size() != grads.size() || params.size() != names.size()) {
        throw DimensionError("adamw_step: parameter/gradient/name lists differ in length");
    }
    if (!moments.matches(std::span<const Tensor<float>* const>(params.data(), params.size()))) {
        throw DimensionError("adamw_step: moments do not match parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i]->shape() != params[i]->shape()) {
            throw DimensionError("adamw_step: gradient for " + names[i] + " has shape " +
                                 shape_str(grads[i]->shape()) + ", parameter has " + shape_str(params[i]->shape()));
        }
        if (!grads[i]->all_finite()) throw DivergenceError("non-finite gradient for parameter " + names[i]);
    }
    const std::int64_t t = ++moments.t;
    const double b1 = config.beta1, b2 = config.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const double decay = 1.0 - lr * config.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i]->data();
        const auto g = grads[i]->data();
        auto m = moments.m[i].data();
        auto v = moments.v[i].data();
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double gk = g[k];
            const double mk = b1 * m[k] + (1.0 - b1) * gk;
            const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            const double update = (mk / c1) / (std::sqrt(vk / c2) + config.eps);
            p[k] = static_cast<float>(static_cast<double>(p[k]) * decay - lr * update);
        }
    }
}

void TrainConfig::validate() const {
    if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    weights.validate();
}

losses::LossWeights TrainConfig::effective_weights() const {
    losses::LossWeights w = weights;
    if (stage == 2 || ablations.disable_ctr) w.alpha1 = 0.0;
    if (stage == 2 || ablations.disable_lam) w.alpha2 = 0.0;
    return w;
}

TrainState initial_state(const model::ModelConfig& config, std::uint64_t seed) {
    TrainState s;
    s.model_config = config;
    s.model = model::init_params(config, derive_seed(seed, "init"));
    s.classifier = losses::init_classifier(config.d_model, derive_seed(seed, "classifier"));
    s.model_moments = AdamMoments::zeros_like(const_param_list(s.model));
    s.classifier_moments = AdamMoments::zeros_like(const_param_list(s.classifier));
    return s;
}

TrainResult train_stage1(const data::Dataset& dataset, const TrainConfig& config, TrainState state,
                         const ProgressFn& progress) {
    if (config.stage != 1) throw ConfigError("train_stage1 needs a stage-1 config");
    for (const auto& ex : dataset) {
        if (ex.kind != data::ExampleKind::translation) {
            throw DataError("stage-1 data must be translation instructions");
        }
    }
    return run(std::move(state), dataset, config, progress);
}

TrainResult train_stage2(TrainState state, const data::Dataset& dataset, const TrainConfig& config,
                         const ProgressFn& progress) {
    if (config.stage != 2) throw ConfigError("train_stage2 needs a stage-2 config");
    if (state.stage == 2) throw ConfigError("checkpoint already finished stage 2");
    return run(std::move(state), dataset, config, progress);
}

std::string loss_csv(std::span<const LossRecord> log) {
    std::string out = "step,ntp,ctr,lam,combined\n";
    char buf[160];
    for (const auto& r : log) {
        std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.step), r.ntp, r.ctr,
                      r.lam, r.combined);
        out += buf;
    }
    return out;
}

}  // namespace axlab::train
