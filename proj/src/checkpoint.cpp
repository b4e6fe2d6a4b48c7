#include "axlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "axlab/rng.hpp"

namespace axlab::ckpt {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr char kMagic[4] = {'A', 'X', 'C', 'K'};

template <typename U>
U swap_bytes(U v) {
    U out = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xFF));
    return out;
}

template <typename U>
void put_le(std::string& out, U v) {
    if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
    char buf[sizeof(U)];
    std::memcpy(buf, &v, sizeof(U));
    out.append(buf, sizeof(U));
}

template <typename U>
U get_le(std::string_view bytes, std::size_t& pos, const char* what) {
    if (bytes.size() - pos < sizeof(U)) {
        throw CheckpointError(CheckpointErrorKind::truncated, std::string("checkpoint truncated while reading ") + what);
    }
    U v;
    std::memcpy(&v, bytes.data() + pos, sizeof(U));
    pos += sizeof(U);
    if constexpr (std::endian::native == std::endian::big) v = swap_bytes(v);
    return v;
}

struct Slot {
    std::string name;
    Tensor<float>* tensor;
};

// Every array in the state in serialization order.
std::vector<Slot> slots(train::TrainState& s) {
    std::vector<Slot> out;
    s.model.visit([&](const std::string& name, Tensor<float>& t) { out.push_back({name, &t}); });
    s.classifier.visit([&](const std::string& name, Tensor<float>& t) { out.push_back({name, &t}); });
    auto add_moments = [&](const std::string& prefix, train::AdamMoments& m, const auto& weights) {
        std::size_t i = 0;
        weights.visit([&](const std::string& name, const Tensor<float>&) {
            out.push_back({prefix + ".m." + name, &m.m[i]});
            out.push_back({prefix + ".v." + name, &m.v[i]});
            ++i;
        });
    };
    add_moments("adam", s.model_moments, s.model);
    add_moments("adam_cls", s.classifier_moments, s.classifier);
    return out;
}

ordered_json config_json(const model::ModelConfig& c) {
    return ordered_json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},     {"n_layers", c.n_layers},
                        {"n_heads", c.n_heads},       {"d_ff", c.d_ff},           {"max_seq_len", c.max_seq_len},
                        {"align_layer", c.align_layer}};
}

model::ModelConfig config_from_json(const json& j) {
    model::ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.align_layer = j.at("align_layer").get<int>();
    return c;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Empty state with every tensor allocated to the shapes `config` implies.
train::TrainState skeleton(const model::ModelConfig& config) {
    train::TrainState s;
    s.model_config = config;
    const auto shape_of = [](int r, int c) { return Tensor<float>::zeros({r, c}); };
    const auto vec = [](int n) { return Tensor<float>::zeros({n}); };
    const int d = config.d_model;
    s.model.tok_emb = shape_of(config.vocab_size, d);
    s.model.pos_emb = shape_of(config.max_seq_len, d);
    for (int l = 0; l < config.n_layers; ++l) {
        model::LayerWeights<Tensor<float>> w;
        w.ln1_gain = vec(d);
        w.ln1_bias = vec(d);
        w.w_qkv = shape_of(d, 3 * d);
        w.b_qkv = vec(3 * d);
        w.w_out = shape_of(d, d);
        w.b_out = vec(d);
        w.ln2_gain = vec(d);
        w.ln2_bias = vec(d);
        w.w_ff1 = shape_of(d, config.d_ff);
        w.b_ff1 = vec(config.d_ff);
        w.w_ff2 = shape_of(config.d_ff, d);
        w.b_ff2 = vec(d);
        s.model.layers.push_back(std::move(w));
    }
    s.model.lnf_gain = vec(d);
    s.model.lnf_bias = vec(d);
    s.model.unembed = shape_of(d, config.vocab_size);
    s.classifier.w1 = shape_of(2 * d, losses::kClassifierHidden);
    s.classifier.b1 = vec(losses::kClassifierHidden);
    s.classifier.w2 = shape_of(losses::kClassifierHidden, losses::kClassifierClasses);
    s.classifier.b2 = vec(losses::kClassifierClasses);
    std::vector<const Tensor<float>*> mp, cp;
    s.model.visit([&](const std::string&, const Tensor<float>& t) { mp.push_back(&t); });
    s.classifier.visit([&](const std::string&, const Tensor<float>& t) { cp.push_back(&t); });
    s.model_moments = train::AdamMoments::zeros_like(mp);
    s.classifier_moments = train::AdamMoments::zeros_like(cp);
    return s;
}

ordered_json history_json(const std::vector<train::StageRecord>& history) {
    ordered_json arr = ordered_json::array();
    for (const auto& r : history) {
        arr.push_back(ordered_json{{"stage", r.stage},
                                   {"first_step", r.first_step},
                                   {"last_step", r.last_step},
                                   {"seed", r.seed},
                                   {"disable_ctr", r.disable_ctr},
                                   {"disable_lam", r.disable_lam},
                                   {"alpha1", r.alpha1},
                                   {"alpha2", r.alpha2},
                                   {"tau", r.tau},
                                   {"learning_rate", r.learning_rate}});
    }
    return arr;
}

std::vector<train::StageRecord> history_from_json(const json& arr) {
    std::vector<train::StageRecord> out;
    for (const auto& j : arr) {
        train::StageRecord r;
        r.stage = j.at("stage").get<int>();
        r.first_step = j.at("first_step").get<std::int64_t>();
        r.last_step = j.at("last_step").get<std::int64_t>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.disable_ctr = j.at("disable_ctr").get<bool>();
        r.disable_lam = j.at("disable_lam").get<bool>();
        r.alpha1 = j.at("alpha1").get<double>();
        r.alpha2 = j.at("alpha2").get<double>();
        r.tau = j.at("tau").get<double>();
        r.learning_rate = j.at("learning_rate").get<double>();
        out.push_back(r);
    }
    return out;
}

}  // namespace

std::string_view to_string(CheckpointErrorKind kind) {
    switch (kind) {
        case CheckpointErrorKind::bad_magic: return "bad_magic";
        case CheckpointErrorKind::version_mismatch: return "version_mismatch";
        case CheckpointErrorKind::corrupt_header: return "corrupt_header";
        case CheckpointErrorKind::truncated: return "truncated";
        case CheckpointErrorKind::shape_mismatch: return "shape_mismatch";
        case CheckpointErrorKind::config_mismatch: return "config_mismatch";
    }
    return "unknown";
}

CheckpointError::CheckpointError(CheckpointErrorKind kind, const std::string& what)
    : Error("checkpoint " + std::string(to_string(kind)) + ": " + what), kind_(kind) {}

std::string serialize(const train::TrainState& state) {
    auto copy = state;  // slots() needs mutable access; the copy keeps this function pure
    auto all = slots(copy);
    ordered_json header;
    header["format_version"] = kCheckpointVersion;
    header["config_hash"] = hex64(state.model_config.hash());
    header["model_config"] = config_json(state.model_config);
    header["stage"] = state.stage;
    header["step"] = state.step;
    header["adam_t"] = state.model_moments.t;
    header["adam_cls_t"] = state.classifier_moments.t;
    header["history"] = history_json(state.history);
    ordered_json tensors = ordered_json::array();
    for (const auto& s : all) tensors.push_back(ordered_json{{"name", s.name}, {"shape", s.tensor->shape()}});
    header["tensors"] = tensors;
    const std::string text = header.dump();

    std::string out(kMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    put_le<std::uint64_t>(out, fnv1a64(text));
    for (const auto& s : all) {
        for (float f : s.tensor->data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

train::TrainState deserialize(std::string_view bytes, const std::optional<model::ModelConfig>& expected) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw CheckpointError(CheckpointErrorKind::bad_magic, "missing AXCK magic");
    }
    std::size_t pos = 4;
    const auto version = get_le<std::uint32_t>(bytes, pos, "version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointErrorKind::version_mismatch,
                              "version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
    }
    const auto header_len = get_le<std::uint64_t>(bytes, pos, "header length");
    if (header_len > bytes.size() - pos) {
        throw CheckpointError(CheckpointErrorKind::truncated, "header length exceeds file size");
    }
    const std::string_view text = bytes.substr(pos, header_len);
    pos += header_len;
    const auto checksum = get_le<std::uint64_t>(bytes, pos, "header checksum");
    if (checksum != fnv1a64(text)) throw CheckpointError(CheckpointErrorKind::corrupt_header, "header checksum mismatch");

    model::ModelConfig config;
    std::string config_hash;
    std::vector<std::pair<std::string, Shape>> declared;
    train::TrainState meta;
    try {
        const auto header = json::parse(text);
        if (header.at("format_version").get<std::uint32_t>() != kCheckpointVersion) {
            throw CheckpointError(CheckpointErrorKind::version_mismatch, "header format_version differs");
        }
        config = config_from_json(header.at("model_config"));
        config.validate();
        config_hash = header.at("config_hash").get<std::string>();
        for (const auto& t : header.at("tensors")) {
            declared.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
        }
        meta.stage = header.at("stage").get<int>();
        meta.step = header.at("step").get<std::int64_t>();
        meta.model_moments.t = header.at("adam_t").get<std::int64_t>();
        meta.classifier_moments.t = header.at("adam_cls_t").get<std::int64_t>();
        meta.history = history_from_json(header.at("history"));
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(CheckpointErrorKind::corrupt_header, e.what());
    }
    if (config_hash != hex64(config.hash())) {
        throw CheckpointError(CheckpointErrorKind::config_mismatch, "config hash does not match stored model config");
    }
    if (expected && !(*expected == config)) {
        throw CheckpointError(CheckpointErrorKind::config_mismatch,
                              "checkpoint model config " + config.canonical() + " differs from " + expected->canonical());
    }

    auto state = skeleton(config);
    auto all = slots(state);
    if (declared.size() != all.size()) {
        throw CheckpointError(CheckpointErrorKind::shape_mismatch, "header lists " + std::to_string(declared.size()) +
                                                                       " tensors, config implies " +
                                                                       std::to_string(all.size()));
    }
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto& [name, shape] = declared[i];
        if (name != all[i].name || shape != all[i].tensor->shape()) {
            throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                  "tensor " + std::to_string(i) + " is " + name + shape_str(shape) + ", expected " +
                                      all[i].name + shape_str(all[i].tensor->shape()));
        }
    }
    for (auto& s : all) {
        auto data = s.tensor->data();
        if ((bytes.size() - pos) / 4 < data.size()) {
            throw CheckpointError(CheckpointErrorKind::truncated, "blob for " + s.name + " is cut short");
        }
        for (auto& f : data) f = std::bit_cast<float>(get_le<std::uint32_t>(bytes, pos, "blob"));
    }
    if (pos != bytes.size()) {
        throw CheckpointError(CheckpointErrorKind::corrupt_header,
                              std::to_string(bytes.size() - pos) + " trailing bytes after the last blob");
    }
    state.stage = meta.stage;
    state.step = meta.step;
    state.model_moments.t = meta.model_moments.t;
    state.classifier_moments.t = meta.classifier_moments.t;
    state.history = std::move(meta.history);
    return state;
}

void save_checkpoint(const train::TrainState& state, const std::filesystem::path& path) {
    const auto bytes = serialize(state);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

train::TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<model::ModelConfig>& expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str(), expected);
}

}  // namespace axlab::ckpt
