#include "axlab/dataset_io.hpp"

#include <fstream>
#include <sstream>

#include "axlab/errors.hpp"

namespace axlab::data {

namespace {

ExampleKind kind_from_string(const std::string& s) {
    if (s == "translation") return ExampleKind::translation;
    if (s == "general") return ExampleKind::general;
    throw DataError("unknown example kind '" + s + "'");
}

Span span_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 2) throw DataError("span must be a two-element array");
    return {j[0].get<int>(), j[1].get<int>()};
}

}  // namespace

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ordered_json example_to_json(const InstructionExample& ex) {
    ordered_json j;
    j["tokens"] = ex.tokens;
    j["src_span"] = {ex.src_span.start, ex.src_span.end};
    j["tgt_span"] = {ex.tgt_span.start, ex.tgt_span.end};
    j["src_lang"] = ex.src_lang;
    j["tgt_lang"] = ex.tgt_lang;
    j["template_id"] = ex.template_id;
    j["kind"] = std::string(to_string(ex.kind));
    return j;
}

InstructionExample example_from_json(const nlohmann::json& j) {
    try {
        InstructionExample ex;
        ex.tokens = j.at("tokens").get<std::vector<int>>();
        ex.src_span = span_from_json(j.at("src_span"));
        ex.tgt_span = span_from_json(j.at("tgt_span"));
        ex.src_lang = j.at("src_lang").get<int>();
        ex.tgt_lang = j.at("tgt_lang").get<int>();
        ex.template_id = j.at("template_id").get<int>();
        ex.kind = kind_from_string(j.at("kind").get<std::string>());
        return ex;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed example: ") + e.what());
    }
}

void write_jsonl(const std::filesystem::path& path, const Dataset& data) {
    std::string text;
    for (const auto& ex : data) {
        text += example_to_json(ex).dump();
        text += '\n';
    }
    write_text(path, text);
}

Dataset read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset " + path.string());
    Dataset out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(example_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

ordered_json manifest_to_json(const DatasetManifest& m) {
    ordered_json j;
    j["format_version"] = m.format_version;
    j["stage"] = m.stage;
    j["seed"] = m.seed;
    j["n_langs"] = m.n_langs;
    ordered_json dirs = ordered_json::object();
    for (const auto& [k, v] : m.direction_counts) dirs[k] = v;
    j["direction_counts"] = dirs;
    ordered_json gen = ordered_json::object();
    for (const auto& [k, v] : m.general_counts) gen[std::to_string(k)] = v;
    j["general_counts"] = gen;
    j["translation_total"] = m.translation_total;
    j["general_total"] = m.general_total;
    j["total"] = m.total();
    if (m.stage == 2) {
        j["ratios"] = {{"translation_to_general", "1:3"}, {"stage2_to_stage1", "1:5"}};
    }
    return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        DatasetManifest m;
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != kFormatVersion) {
            throw DataError("unsupported dataset format version " + std::to_string(m.format_version));
        }
        m.stage = j.at("stage").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.n_langs = j.at("n_langs").get<int>();
        for (const auto& [k, v] : j.at("direction_counts").items()) m.direction_counts[k] = v.get<int>();
        for (const auto& [k, v] : j.at("general_counts").items()) m.general_counts[std::stoi(k)] = v.get<int>();
        m.translation_total = j.at("translation_total").get<int>();
        m.general_total = j.at("general_total").get<int>();
        if (j.at("total").get<int>() != m.total()) throw DataError("manifest total is inconsistent");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed manifest: ") + e.what());
    }
}

void write_bundle(const std::filesystem::path& path, const DataBundle& bundle) {
    ordered_json j;
    j["format_version"] = bundle.format_version;
    j["seed"] = bundle.seed;
    j["n_langs"] = static_cast<int>(bundle.languages.size());
    j["base_vocab"] = bundle.base_vocab;
    j["vocab_size"] = Vocab(static_cast<int>(bundle.languages.size()), bundle.base_vocab).size();
    ordered_json langs = ordered_json::array();
    for (const auto& s : bundle.languages) {
        ordered_json l;
        l["lang"] = s.lang_id;
        l["word_order"] = std::string(to_string(s.word_order));
        l["script_offset"] = s.script_offset;
        l["cipher"] = s.cipher;
        langs.push_back(l);
    }
    j["languages"] = langs;
    ordered_json files = ordered_json::object();
    for (const auto& [name, m] : bundle.files) files[name] = manifest_to_json(m);
    j["files"] = files;
    write_text(path, j.dump(2) + "\n");
}

DataBundle read_bundle(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    }
    try {
        DataBundle b;
        b.format_version = j.at("format_version").get<int>();
        if (b.format_version != kFormatVersion) {
            throw DataError("unsupported manifest format version " + std::to_string(b.format_version));
        }
        b.seed = j.at("seed").get<std::uint64_t>();
        b.base_vocab = j.at("base_vocab").get<int>();
        const int k = j.at("n_langs").get<int>();
        const Vocab vocab(k, b.base_vocab);
        for (const auto& l : j.at("languages")) {
            ToyLanguageSpec s;
            s.lang_id = l.at("lang").get<int>();
            s.word_order = word_order_from_string(l.at("word_order").get<std::string>());
            s.script_offset = l.at("script_offset").get<int>();
            s.base_vocab = b.base_vocab;
            s.cipher = l.at("cipher").get<std::vector<int>>();
            if (static_cast<int>(s.cipher.size()) != b.base_vocab) throw DataError("cipher has wrong size");
            s.inverse.assign(s.cipher.size(), -1);
            for (std::size_t w = 0; w < s.cipher.size(); ++w) {
                const int c = s.cipher[w];
                if (c < 0 || c >= b.base_vocab || s.inverse[static_cast<std::size_t>(c)] != -1) {
                    throw DataError("cipher of language " + std::to_string(s.lang_id) + " is not a bijection");
                }
                s.inverse[static_cast<std::size_t>(c)] = static_cast<int>(w);
            }
            if (s.lang_id != static_cast<int>(b.languages.size()) || s.script_offset != vocab.script_offset(s.lang_id)) {
                throw DataError("language table does not match the vocabulary layout");
            }
            b.languages.push_back(std::move(s));
        }
        if (static_cast<int>(b.languages.size()) != k) throw DataError("language count mismatch");
        for (const auto& [name, m] : j.at("files").items()) b.files[name] = manifest_from_json(m);
        return b;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed manifest " + path.string() + ": " + e.what());
    }
}

LoadedDataset load_dataset(const std::filesystem::path& jsonl_path) {
    const auto manifest_path = jsonl_path.parent_path() / "manifest.json";
    if (!std::filesystem::exists(jsonl_path)) throw IoError("dataset not found: " + jsonl_path.string());
    if (!std::filesystem::exists(manifest_path)) throw IoError("manifest not found: " + manifest_path.string());
    auto bundle = read_bundle(manifest_path);
    const auto name = jsonl_path.filename().string();
    const auto it = bundle.files.find(name);
    if (it == bundle.files.end()) throw DataError("manifest has no entry for " + name);
    LoadedDataset out;
    out.data = read_jsonl(jsonl_path);
    out.manifest = it->second;
    out.specs = std::move(bundle.languages);
    reconcile(out.manifest, out.data);
    const Vocab vocab(static_cast<int>(out.specs.size()), bundle.base_vocab);
    for (const auto& ex : out.data) validate_example(ex, vocab);
    return out;
}

}  // namespace axlab::data
