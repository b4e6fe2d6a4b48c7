#include "axlab/run_config.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "axlab/dataset_io.hpp"
#include "axlab/errors.hpp"

namespace axlab::config {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

// Reads the keys of one JSON object into typed fields, rejecting anything it
// was not told about.
class SectionReader {
public:
    SectionReader(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <typename T>
    void field(const char* key, T& out) {
        known_.emplace_back(key);
        const auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError("");
            } else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer()) throw ConfigError("");
            } else {
                if (!it->is_number()) throw ConfigError("");
            }
            out = it->template get<T>();
        } catch (const std::exception&) {
            throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
        }
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (std::find(known_.begin(), known_.end(), k) == known_.end()) {
                throw ConfigError("unknown config key '" + name_ + "." + k + "'");
            }
        }
    }

private:
    const json& j_;
    std::string name_;
    std::vector<std::string> known_;
};

void read_stage(const json& j, const std::string& name, StageSection& s, bool aux) {
    SectionReader r(j, name);
    r.field("epochs", s.epochs);
    r.field("batch_size", s.batch_size);
    r.field("learning_rate", s.learning_rate);
    if (aux) {
        r.field("alpha1", s.alpha1);
        r.field("alpha2", s.alpha2);
        r.field("tau", s.tau);
        r.field("disable_ctr", s.disable_ctr);
        r.field("disable_lam", s.disable_lam);
        r.field("symmetric_ctr", s.symmetric_ctr);
    }
    r.field("beta1", s.beta1);
    r.field("beta2", s.beta2);
    r.field("eps", s.eps);
    r.field("weight_decay", s.weight_decay);
    r.field("cosine_decay", s.cosine_decay);
    r.field("max_steps", s.max_steps);
    r.finish();
}

ordered_json stage_json(const StageSection& s, bool aux) {
    ordered_json j;
    j["epochs"] = s.epochs;
    j["batch_size"] = s.batch_size;
    j["learning_rate"] = s.learning_rate;
    if (aux) {
        j["alpha1"] = s.alpha1;
        j["alpha2"] = s.alpha2;
        j["tau"] = s.tau;
        j["disable_ctr"] = s.disable_ctr;
        j["disable_lam"] = s.disable_lam;
        j["symmetric_ctr"] = s.symmetric_ctr;
    }
    j["beta1"] = s.beta1;
    j["beta2"] = s.beta2;
    j["eps"] = s.eps;
    j["weight_decay"] = s.weight_decay;
    j["cosine_decay"] = s.cosine_decay;
    j["max_steps"] = s.max_steps;
    return j;
}

}  // namespace

model::ModelConfig ModelSection::to_model(int vocab_size) const {
    model::ModelConfig c;
    c.vocab_size = vocab_size;
    c.d_model = d_model;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.d_ff = d_ff;
    c.max_seq_len = max_seq_len;
    c.align_layer = align_layer;
    c.validate();
    return c;
}

train::TrainConfig StageSection::to_train(int stage, std::uint64_t seed) const {
    train::TrainConfig t;
    t.stage = stage;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.learning_rate = learning_rate;
    t.weights = {alpha1, alpha2, tau};
    t.seed = seed;
    t.ablations = {disable_ctr, disable_lam};
    t.adam = {beta1, beta2, eps, weight_decay};
    t.cosine_decay = cosine_decay;
    t.symmetric_ctr = symmetric_ctr;
    t.max_steps = max_steps;
    t.validate();
    return t;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    SectionReader top(j, "<root>");
    top.field("seed", c.seed);
    static const std::vector<std::string> sections{"languages", "model", "train_stage1", "train_stage2", "eval", "probes"};
    for (const auto& [k, v] : j.items()) {
        if (k == "seed") continue;
        if (std::find(sections.begin(), sections.end(), k) == sections.end()) {
            throw ConfigError("unknown config section '" + k + "'");
        }
    }
    if (j.contains("languages")) {
        SectionReader r(j.at("languages"), "languages");
        r.field("n_langs", c.languages.n_langs);
        r.field("base_vocab", c.languages.base_vocab);
        r.field("n_per_direction", c.languages.n_per_direction);
        r.field("n_eval_per_direction", c.languages.n_eval_per_direction);
        r.finish();
    }
    if (j.contains("model")) {
        SectionReader r(j.at("model"), "model");
        r.field("d_model", c.model.d_model);
        r.field("n_layers", c.model.n_layers);
        r.field("n_heads", c.model.n_heads);
        r.field("d_ff", c.model.d_ff);
        r.field("max_seq_len", c.model.max_seq_len);
        r.field("align_layer", c.model.align_layer);
        r.finish();
    }
    if (j.contains("train_stage1")) read_stage(j.at("train_stage1"), "train_stage1", c.train_stage1, true);
    if (j.contains("train_stage2")) read_stage(j.at("train_stage2"), "train_stage2", c.train_stage2, false);
    if (j.contains("eval")) {
        SectionReader r(j.at("eval"), "eval");
        r.field("max_new_tokens", c.eval.max_new_tokens);
        r.finish();
    }
    if (j.contains("probes")) {
        SectionReader r(j.at("probes"), "probes");
        r.field("n_sentences", c.probes.n_sentences);
        r.field("projection_sentences", c.probes.projection_sentences);
        r.field("max_lens_probes", c.probes.max_lens_probes);
        r.finish();
    }
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    const auto text = data::read_text(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse config " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

ordered_json RunConfig::to_json() const {
    ordered_json j;
    j["seed"] = seed;
    j["languages"] = ordered_json{{"n_langs", languages.n_langs},
                                  {"base_vocab", languages.base_vocab},
                                  {"n_per_direction", languages.n_per_direction},
                                  {"n_eval_per_direction", languages.n_eval_per_direction}};
    j["model"] = ordered_json{{"d_model", model.d_model},         {"n_layers", model.n_layers},
                              {"n_heads", model.n_heads},         {"d_ff", model.d_ff},
                              {"max_seq_len", model.max_seq_len}, {"align_layer", model.align_layer}};
    j["train_stage1"] = stage_json(train_stage1, true);
    j["train_stage2"] = stage_json(train_stage2, false);
    j["eval"] = ordered_json{{"max_new_tokens", eval.max_new_tokens}};
    j["probes"] = ordered_json{{"n_sentences", probes.n_sentences},
                               {"projection_sentences", probes.projection_sentences},
                               {"max_lens_probes", probes.max_lens_probes}};
    return j;
}

}  // namespace axlab::config
