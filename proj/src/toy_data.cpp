#include "axlab/toy_data.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "axlab/errors.hpp"
#include "axlab/rng.hpp"

namespace axlab::data {

namespace {

// Ten translation instruction prefixes. "{src}" and "{tgt}" are replaced by
// language-name tokens; three of them name the target first.
const std::array<std::vector<std::string_view>, kNumTranslationTemplates> kTranslationTemplates{{
    {"translate", "from", "{src}", "into", "{tgt}", ":"},
    {"{src}", "to", "{tgt}", "please", ":"},
    {"express", "the", "following", "{src}", "words", "in", "{tgt}", ":"},
    {"map", "{src}", "words", "onto", "{tgt}", ":"},
    {"please", "write", "this", "{src}", "input", "in", "{tgt}", ":"},
    {"source", "{src}", "target", "{tgt}", ":"},
    {"what", "is", "the", "{tgt}", "for", "this", "{src}", "input", "?"},
    {"from", "{src}", ",", "produce", "{tgt}", ":"},
    {"{tgt}", "output", "for", "{src}", "input", ":"},
    {"carry", "this", "over", "from", "{src}", "into", "{tgt}", ":"},
}};

const std::array<std::vector<std::string_view>, kNumGeneralTasks> kGeneralTemplates{{
    {"copy", "this", "{lang}", "text", "."},
    {"reverse", "this", "{lang}", "text", "."},
    {"count", "the", "words", "in", "this", "{lang}", "text", "."},
}};

std::vector<int> apply_order(std::span<const int> words, WordOrder order) {
    std::vector<int> out(words.begin(), words.end());
    switch (order) {
        case WordOrder::identity: break;
        case WordOrder::reversed: std::reverse(out.begin(), out.end()); break;
        case WordOrder::rotate1:
            if (!out.empty()) std::rotate(out.begin(), out.begin() + 1, out.end());
            break;
    }
    return out;
}

std::vector<int> undo_order(std::span<const int> words, WordOrder order) {
    std::vector<int> out(words.begin(), words.end());
    switch (order) {
        case WordOrder::identity: break;
        case WordOrder::reversed: std::reverse(out.begin(), out.end()); break;
        case WordOrder::rotate1:
            if (!out.empty()) std::rotate(out.begin(), out.end() - 1, out.end());
            break;
    }
    return out;
}

std::vector<int> draw_meaning(Rng& rng, int base_vocab) {
    const int len = rng.uniform_int(kMinSentenceLen, kMaxSentenceLen);
    std::vector<int> m(static_cast<std::size_t>(len));
    for (auto& w : m) w = static_cast<int>(rng.uniform_below(static_cast<std::uint64_t>(base_vocab)));
    return m;
}

void check_specs(std::span<const ToyLanguageSpec> specs) {
    if (specs.size() < 2) throw DataError("need at least two languages");
}

// Pivot-centric directions in a fixed order: (0,1), (1,0), (0,2), (2,0), ...
std::vector<std::pair<int, int>> pivot_directions(int k) {
    std::vector<std::pair<int, int>> dirs;
    for (int l = 1; l < k; ++l) {
        dirs.emplace_back(0, l);
        dirs.emplace_back(l, 0);
    }
    return dirs;
}

InstructionExample translation_example(const ToyLanguageSpec& src, const ToyLanguageSpec& tgt,
                                       std::span<const int> meaning, int template_id, const Vocab& vocab) {
    const auto s = src.render(meaning);
    const auto t = tgt.render(meaning);
    return build_instruction(s, t, template_id, src.lang_id, tgt.lang_id, vocab);
}

std::set<std::vector<int>> collect_meanings(std::span<const Dataset> datasets,
                                            std::span<const ToyLanguageSpec> specs) {
    std::set<std::vector<int>> seen;
    for (const auto& ds : datasets) {
        for (const auto& ex : ds) {
            const auto& spec = specs[static_cast<std::size_t>(ex.src_lang)];
            const std::span<const int> src(ex.tokens.data() + ex.src_span.start,
                                           static_cast<std::size_t>(ex.src_span.size()));
            seen.insert(spec.meaning_of(src));
            if (ex.kind == ExampleKind::translation) {
                const auto& tspec = specs[static_cast<std::size_t>(ex.tgt_lang)];
                const std::span<const int> tgt(ex.tokens.data() + ex.tgt_span.start,
                                               static_cast<std::size_t>(ex.tgt_span.size()));
                seen.insert(tspec.meaning_of(tgt));
            }
        }
    }
    return seen;
}

}  // namespace

std::string_view to_string(WordOrder order) {
    switch (order) {
        case WordOrder::identity: return "identity";
        case WordOrder::reversed: return "reversed";
        case WordOrder::rotate1: return "rotate1";
    }
    return "identity";
}

WordOrder word_order_from_string(std::string_view s) {
    if (s == "identity") return WordOrder::identity;
    if (s == "reversed") return WordOrder::reversed;
    if (s == "rotate1") return WordOrder::rotate1;
    throw DataError("unknown word order '" + std::string(s) + "'");
}

std::string_view to_string(ExampleKind kind) {
    return kind == ExampleKind::translation ? "translation" : "general";
}

// ---- Vocab -----------------------------------------------------------------

const std::vector<std::string>& Vocab::instruction_words() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w;
        auto add = [&](std::string_view s) {
            if (s.front() == '{') return;
            if (std::find(w.begin(), w.end(), s) == w.end()) w.emplace_back(s);
        };
        for (const auto& t : kTranslationTemplates) {
            for (auto s : t) add(s);
        }
        for (const auto& t : kGeneralTemplates) {
            for (auto s : t) add(s);
        }
        return w;
    }();
    return words;
}

Vocab::Vocab(int n_langs, int base_vocab) : n_langs_(n_langs), base_vocab_(base_vocab) {
    if (n_langs < 1) throw DataError("vocabulary needs at least one language");
    if (base_vocab < kMaxSentenceLen + 1) throw DataError("base vocabulary too small");
}

int Vocab::size() const {
    return 3 + static_cast<int>(instruction_words().size()) + n_langs_ + n_langs_ * base_vocab_;
}

int Vocab::word(std::string_view w) const {
    const auto& words = instruction_words();
    const auto it = std::find(words.begin(), words.end(), w);
    if (it == words.end()) throw DataError("unknown instruction word '" + std::string(w) + "'");
    return 3 + static_cast<int>(it - words.begin());
}

std::string_view Vocab::word_text(int token) const {
    const auto& words = instruction_words();
    const int i = token - 3;
    if (i < 0 || i >= static_cast<int>(words.size())) return {};
    return words[static_cast<std::size_t>(i)];
}

int Vocab::lang_name(int lang) const {
    if (lang < 0 || lang >= n_langs_) throw DataError("language " + std::to_string(lang) + " out of range");
    return 3 + static_cast<int>(instruction_words().size()) + lang;
}

int Vocab::script_offset(int lang) const {
    if (lang < 0 || lang >= n_langs_) throw DataError("language " + std::to_string(lang) + " out of range");
    return 3 + static_cast<int>(instruction_words().size()) + n_langs_ + lang * base_vocab_;
}

std::optional<int> Vocab::lang_of(int token) const {
    const int first = script_offset(0);
    if (token < first || token >= size()) return std::nullopt;
    return (token - first) / base_vocab_;
}

// ---- languages ---------------------------------------------------------------

std::vector<int> ToyLanguageSpec::render(std::span<const int> meaning) const {
    auto ordered = apply_order(meaning, word_order);
    for (auto& w : ordered) {
        if (w < 0 || w >= base_vocab) throw DataError("meaning word " + std::to_string(w) + " out of range");
        w = script_offset + cipher[static_cast<std::size_t>(w)];
    }
    return ordered;
}

std::vector<int> ToyLanguageSpec::meaning_of(std::span<const int> sentence) const {
    std::vector<int> surface(sentence.size());
    for (std::size_t i = 0; i < sentence.size(); ++i) {
        const int local = sentence[i] - script_offset;
        if (local < 0 || local >= base_vocab) {
            throw DataError("token " + std::to_string(sentence[i]) + " is not in the script of language " +
                            std::to_string(lang_id));
        }
        surface[i] = inverse[static_cast<std::size_t>(local)];
    }
    return undo_order(surface, word_order);
}

std::vector<ToyLanguageSpec> gen_languages(int k, std::uint64_t seed, int base_vocab) {
    if (k < 2) throw DataError("need at least 2 languages, got " + std::to_string(k));
    const Vocab vocab(k, base_vocab);
    std::vector<ToyLanguageSpec> specs;
    for (int l = 0; l < k; ++l) {
        ToyLanguageSpec s;
        s.lang_id = l;
        s.base_vocab = base_vocab;
        s.script_offset = vocab.script_offset(l);
        s.cipher.resize(static_cast<std::size_t>(base_vocab));
        std::iota(s.cipher.begin(), s.cipher.end(), 0);
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(l)));
        rng.shuffle(std::span<int>(s.cipher));
        s.inverse.resize(s.cipher.size());
        for (std::size_t w = 0; w < s.cipher.size(); ++w) s.inverse[static_cast<std::size_t>(s.cipher[w])] = static_cast<int>(w);
        if (k >= 3 && l == k - 1) s.word_order = WordOrder::reversed;
        else if (k >= 5 && l == k - 2) s.word_order = WordOrder::rotate1;
        specs.push_back(std::move(s));
    }
    return specs;
}

std::vector<int> translate_oracle(std::span<const int> sentence, const ToyLanguageSpec& from,
                                  const ToyLanguageSpec& to) {
    return to.render(from.meaning_of(sentence));
}

int langid(std::span<const int> tokens, const Vocab& vocab) {
    std::vector<int> counts(static_cast<std::size_t>(vocab.n_langs()), 0);
    int total = 0;
    for (int t : tokens) {
        if (const auto l = vocab.lang_of(t)) {
            ++counts[static_cast<std::size_t>(*l)];
            ++total;
        }
    }
    if (total == 0) return kMixed;
    const auto best = std::max_element(counts.begin(), counts.end());
    // strictly more than 80%, in integer arithmetic
    if (*best * 5 > total * 4) return static_cast<int>(best - counts.begin());
    return kMixed;
}

// ---- instructions --------------------------------------------------------------

std::vector<int> InstructionExample::prompt() const {
    return {tokens.begin(), tokens.begin() + src_span.end + 1};
}

std::vector<int> InstructionExample::reference() const {
    return {tokens.begin() + tgt_span.start, tokens.begin() + tgt_span.end};
}

std::vector<int> translation_prefix(int template_id, int src_lang, int tgt_lang, const Vocab& vocab) {
    if (template_id < 0 || template_id >= kNumTranslationTemplates) {
        throw DataError("template id " + std::to_string(template_id) + " outside [0, 10)");
    }
    std::vector<int> out{Vocab::kBos};
    for (auto w : kTranslationTemplates[static_cast<std::size_t>(template_id)]) {
        if (w == "{src}") out.push_back(vocab.lang_name(src_lang));
        else if (w == "{tgt}") out.push_back(vocab.lang_name(tgt_lang));
        else out.push_back(vocab.word(w));
    }
    return out;
}

std::vector<int> general_prefix(GeneralTask task, int lang, const Vocab& vocab) {
    std::vector<int> out{Vocab::kBos};
    for (auto w : kGeneralTemplates[static_cast<std::size_t>(task)]) {
        out.push_back(w == "{lang}" ? vocab.lang_name(lang) : vocab.word(w));
    }
    return out;
}

namespace {

InstructionExample assemble(std::vector<int> prefix, std::span<const int> src, std::span<const int> tgt,
                            int max_seq_len) {
    if (src.empty() || tgt.empty()) throw DataError("instruction sentences must be nonempty");
    InstructionExample ex;
    ex.tokens = std::move(prefix);
    ex.src_span.start = static_cast<int>(ex.tokens.size());
    ex.tokens.insert(ex.tokens.end(), src.begin(), src.end());
    ex.src_span.end = static_cast<int>(ex.tokens.size());
    ex.tokens.push_back(Vocab::kSep);
    ex.tgt_span.start = static_cast<int>(ex.tokens.size());
    ex.tokens.insert(ex.tokens.end(), tgt.begin(), tgt.end());
    ex.tgt_span.end = static_cast<int>(ex.tokens.size());
    ex.tokens.push_back(Vocab::kEos);
    if (static_cast<int>(ex.tokens.size()) > max_seq_len) {
        throw DataError("instruction of " + std::to_string(ex.tokens.size()) + " tokens exceeds budget " +
                        std::to_string(max_seq_len));
    }
    return ex;
}

}  // namespace

InstructionExample build_instruction(std::span<const int> src, std::span<const int> tgt, int template_id,
                                     int src_lang, int tgt_lang, const Vocab& vocab, int max_seq_len) {
    auto ex = assemble(translation_prefix(template_id, src_lang, tgt_lang, vocab), src, tgt, max_seq_len);
    ex.src_lang = src_lang;
    ex.tgt_lang = tgt_lang;
    ex.template_id = template_id;
    ex.kind = ExampleKind::translation;
    return ex;
}

InstructionExample build_general(GeneralTask task, std::span<const int> sentence, int lang,
                                 const ToyLanguageSpec& spec, const Vocab& vocab, int max_seq_len) {
    std::vector<int> response;
    switch (task) {
        case GeneralTask::copy: response.assign(sentence.begin(), sentence.end()); break;
        case GeneralTask::reverse: response.assign(sentence.rbegin(), sentence.rend()); break;
        case GeneralTask::count: {
            const std::vector<int> n{static_cast<int>(sentence.size())};
            response = spec.render(n);
            break;
        }
    }
    auto ex = assemble(general_prefix(task, lang, vocab), sentence, response, max_seq_len);
    ex.src_lang = lang;
    ex.tgt_lang = lang;
    ex.template_id = static_cast<int>(task);
    ex.kind = ExampleKind::general;
    return ex;
}

void validate_example(const InstructionExample& ex, const Vocab& vocab) {
    const int n = static_cast<int>(ex.tokens.size());
    auto fail = [](const std::string& msg) { throw DataError("invalid example: " + msg); };
    if (ex.src_span.start < 1 || ex.src_span.start >= ex.src_span.end) fail("bad source span");
    if (ex.tgt_span.start >= ex.tgt_span.end || ex.tgt_span.end > n) fail("bad target span");
    if (ex.tgt_span.start <= ex.src_span.end - 1) fail("target span must follow source span");
    if (ex.src_span.end >= n || ex.tokens[static_cast<std::size_t>(ex.src_span.end)] != Vocab::kSep) {
        fail("missing separator after source span");
    }
    if (ex.tokens.back() != Vocab::kEos || ex.tgt_span.end != n - 1) fail("target span must end at EOS");
    if (ex.src_lang < 0 || ex.src_lang >= vocab.n_langs() || ex.tgt_lang < 0 || ex.tgt_lang >= vocab.n_langs()) {
        fail("language id out of range");
    }
    for (int i = 0; i < n; ++i) {
        const int t = ex.tokens[static_cast<std::size_t>(i)];
        if (t < 0 || t >= vocab.size()) fail("token id out of vocabulary");
        const bool in_src = i >= ex.src_span.start && i < ex.src_span.end;
        const bool in_tgt = i >= ex.tgt_span.start && i < ex.tgt_span.end;
        if (in_src && vocab.lang_of(t) != ex.src_lang) fail("source span holds a non-source token");
        if (in_tgt && vocab.lang_of(t) != ex.tgt_lang) fail("target span holds a non-target token");
        if (!in_src && !in_tgt && vocab.is_content(t)) fail("content token outside spans");
    }
}

// ---- manifests -------------------------------------------------------------------

DatasetManifest summarize(const Dataset& data, int stage, std::uint64_t seed, int n_langs) {
    DatasetManifest m;
    m.stage = stage;
    m.seed = seed;
    m.n_langs = n_langs;
    for (const auto& ex : data) {
        if (ex.kind == ExampleKind::translation) {
            ++m.direction_counts[std::to_string(ex.src_lang) + "-" + std::to_string(ex.tgt_lang)];
            ++m.translation_total;
        } else {
            ++m.general_counts[ex.src_lang];
            ++m.general_total;
        }
    }
    return m;
}

void reconcile(const DatasetManifest& manifest, const Dataset& data) {
    auto actual = summarize(data, manifest.stage, manifest.seed, manifest.n_langs);
    actual.format_version = manifest.format_version;
    if (!(actual == manifest)) {
        throw DataError("manifest counts (" + std::to_string(manifest.total()) +
                        " examples) do not reconcile with file contents (" + std::to_string(actual.total()) + ")");
    }
}

// ---- dataset recipes -------------------------------------------------------------

std::vector<int> random_meaning(std::uint64_t seed, int base_vocab) {
    Rng rng(seed);
    return draw_meaning(rng, base_vocab);
}

Dataset build_stage1(std::span<const ToyLanguageSpec> specs, int n_per_direction, std::uint64_t seed) {
    check_specs(specs);
    if (n_per_direction < 1) throw DataError("n_per_direction must be >= 1");
    const Vocab vocab(static_cast<int>(specs.size()), specs[0].base_vocab);
    const auto stream = derive_seed(seed, "stage1");
    Dataset out;
    std::uint64_t index = 0;
    for (const auto& [s, t] : pivot_directions(static_cast<int>(specs.size()))) {
        for (int i = 0; i < n_per_direction; ++i, ++index) {
            Rng rng(derive_seed(stream, index));
            const auto meaning = draw_meaning(rng, vocab.base_vocab());
            const int tpl = static_cast<int>(rng.uniform_below(kNumTranslationTemplates));
            out.push_back(translation_example(specs[static_cast<std::size_t>(s)], specs[static_cast<std::size_t>(t)],
                                              meaning, tpl, vocab));
        }
    }
    return out;
}

Dataset build_stage2(std::span<const ToyLanguageSpec> specs, int stage1_size, std::uint64_t seed) {
    check_specs(specs);
    if (stage1_size < 0) throw DataError("stage1_size must be non-negative");
    const int k = static_cast<int>(specs.size());
    const Vocab vocab(k, specs[0].base_vocab);
    // 1:5 stage-2 to stage-1, then 1:3 translation to general; round half up.
    const int total = (stage1_size * 2 + 5) / 10;
    const int n_translation = (total * 2 + 4) / 8;
    const int n_general = total - n_translation;
    const auto dirs = pivot_directions(k);
    Dataset out;
    const auto tstream = derive_seed(seed, "stage2-translation");
    for (int i = 0; i < n_translation; ++i) {
        Rng rng(derive_seed(tstream, static_cast<std::uint64_t>(i)));
        const auto [s, t] = dirs[static_cast<std::size_t>(i) % dirs.size()];
        const auto meaning = draw_meaning(rng, vocab.base_vocab());
        const int tpl = static_cast<int>(rng.uniform_below(kNumTranslationTemplates));
        out.push_back(translation_example(specs[static_cast<std::size_t>(s)], specs[static_cast<std::size_t>(t)],
                                          meaning, tpl, vocab));
    }
    const auto gstream = derive_seed(seed, "stage2-general");
    for (int i = 0; i < n_general; ++i) {
        Rng rng(derive_seed(gstream, static_cast<std::uint64_t>(i)));
        const int lang = i % k;
        const auto& spec = specs[static_cast<std::size_t>(lang)];
        const auto meaning = draw_meaning(rng, vocab.base_vocab());
        const auto task = static_cast<GeneralTask>(rng.uniform_below(kNumGeneralTasks));
        out.push_back(build_general(task, spec.render(meaning), lang, spec, vocab));
    }
    return out;
}

Dataset build_eval(std::span<const ToyLanguageSpec> specs, int n_per_direction, std::uint64_t seed,
                   std::span<const Dataset> exclude) {
    check_specs(specs);
    if (n_per_direction < 1) throw DataError("n_per_direction must be >= 1");
    const int k = static_cast<int>(specs.size());
    const Vocab vocab(k, specs[0].base_vocab);
    auto seen = collect_meanings(exclude, specs);
    const auto stream = derive_seed(seed, "eval");
    Dataset out;
    std::uint64_t index = 0;
    for (int s = 0; s < k; ++s) {
        for (int t = 0; t < k; ++t) {
            if (s == t) continue;
            for (int i = 0; i < n_per_direction; ++i) {
                while (true) {
                    Rng rng(derive_seed(stream, index++));
                    auto meaning = draw_meaning(rng, vocab.base_vocab());
                    const int tpl = static_cast<int>(rng.uniform_below(kNumTranslationTemplates));
                    if (seen.count(meaning)) continue;
                    out.push_back(translation_example(specs[static_cast<std::size_t>(s)],
                                                      specs[static_cast<std::size_t>(t)], meaning, tpl, vocab));
                    break;
                }
            }
        }
    }
    return out;
}

std::vector<std::vector<int>> parallel_meanings(int n, std::uint64_t seed, std::span<const Dataset> exclude,
                                                std::span<const ToyLanguageSpec> specs) {
    const auto seen = collect_meanings(exclude, specs);
    const int base = specs.empty() ? kDefaultBaseVocab : specs[0].base_vocab;
    const auto stream = derive_seed(seed, "parallel");
    std::vector<std::vector<int>> out;
    for (std::uint64_t index = 0; static_cast<int>(out.size()) < n; ++index) {
        Rng rng(derive_seed(stream, index));
        auto meaning = draw_meaning(rng, base);
        if (!seen.count(meaning)) out.push_back(std::move(meaning));
    }
    return out;
}

}  // namespace axlab::data
