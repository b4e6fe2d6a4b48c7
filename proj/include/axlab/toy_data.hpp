#pragma once

// Synthetic cipher languages with exact translation and language-ID oracles,
// instruction construction, and the two-stage dataset recipes.
//
// A sentence has a language-neutral "meaning": a sequence of base words
// 0..base_vocab-1. Language L renders a meaning by applying its word order,
// then its cipher, then offsetting into its private script range of token ids.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace axlab::data {

inline constexpr int kDefaultBaseVocab = 64;
inline constexpr int kMinSentenceLen = 3;
inline constexpr int kMaxSentenceLen = 12;
inline constexpr int kNumTranslationTemplates = 10;
inline constexpr int kFormatVersion = 1;

enum class WordOrder { identity, reversed, rotate1 };
std::string_view to_string(WordOrder order);
WordOrder word_order_from_string(std::string_view s);

/// Token-id layout shared by every language set of a given size.
///   0 BOS, 1 EOS, 2 SEP, then instruction words, then one name token per
///   language, then n_langs script ranges of base_vocab ids each.
class Vocab {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kSep = 2;

    Vocab(int n_langs, int base_vocab = kDefaultBaseVocab);

    int n_langs() const { return n_langs_; }
    int base_vocab() const { return base_vocab_; }
    int size() const;

    /// Id of an instruction word; throws DataError for unknown words.
    int word(std::string_view w) const;
    std::string_view word_text(int token) const;
    int lang_name(int lang) const;
    int script_offset(int lang) const;
    /// Language whose script range holds `token`, or nullopt for non-content tokens.
    std::optional<int> lang_of(int token) const;
    bool is_content(int token) const { return lang_of(token).has_value(); }

    static const std::vector<std::string>& instruction_words();

private:
    int n_langs_;
    int base_vocab_;
};

struct ToyLanguageSpec {
    int lang_id = 0;
    std::vector<int> cipher;   // base word -> surface word, a permutation
    std::vector<int> inverse;  // surface word -> base word
    WordOrder word_order = WordOrder::identity;
    int script_offset = 0;
    int base_vocab = kDefaultBaseVocab;

    /// Meaning -> token ids in this language.
    std::vector<int> render(std::span<const int> meaning) const;
    /// Token ids -> meaning. Throws DataError on tokens outside the script range.
    std::vector<int> meaning_of(std::span<const int> sentence) const;
};

/// Language 0 is the pivot. For k >= 3 the last language uses reversed word
/// order and, for k >= 5, the second-to-last rotates by one.
std::vector<ToyLanguageSpec> gen_languages(int k, std::uint64_t seed, int base_vocab = kDefaultBaseVocab);

/// Exact translation: inverse cipher, undo `from`'s order, apply `to`'s order and cipher.
std::vector<int> translate_oracle(std::span<const int> sentence, const ToyLanguageSpec& from,
                                  const ToyLanguageSpec& to);

inline constexpr int kMixed = -1;
/// Majority script vote over content tokens; kMixed unless one language holds
/// strictly more than 80% of them (or there are no content tokens).
int langid(std::span<const int> tokens, const Vocab& vocab);

struct Span {
    int start = 0;
    int end = 0;
    int size() const { return end - start; }
    bool operator==(const Span&) const = default;
};

enum class ExampleKind { translation, general };
std::string_view to_string(ExampleKind kind);

enum class GeneralTask { copy, reverse, count };
inline constexpr int kNumGeneralTasks = 3;

struct InstructionExample {
    std::vector<int> tokens;
    Span src_span;
    Span tgt_span;
    int src_lang = 0;
    int tgt_lang = 0;
    int template_id = 0;
    ExampleKind kind = ExampleKind::translation;

    /// Tokens up to and including the separator: what a model is prompted with.
    std::vector<int> prompt() const;
    /// Reference response: the target span.
    std::vector<int> reference() const;
    bool operator==(const InstructionExample&) const = default;
};

/// Tokenized instruction prefix (BOS + words) for translation template 0..9.
std::vector<int> translation_prefix(int template_id, int src_lang, int tgt_lang, const Vocab& vocab);
std::vector<int> general_prefix(GeneralTask task, int lang, const Vocab& vocab);

/// [prefix, src, SEP, tgt, EOS] with spans over src and tgt.
/// Throws DataError when the result would exceed max_seq_len.
InstructionExample build_instruction(std::span<const int> src, std::span<const int> tgt, int template_id,
                                     int src_lang, int tgt_lang, const Vocab& vocab, int max_seq_len = 64);
InstructionExample build_general(GeneralTask task, std::span<const int> sentence, int lang,
                                 const ToyLanguageSpec& spec, const Vocab& vocab, int max_seq_len = 64);

/// Checks span invariants against the example's own tokens.
void validate_example(const InstructionExample& ex, const Vocab& vocab);

using Dataset = std::vector<InstructionExample>;

struct DatasetManifest {
    int format_version = kFormatVersion;
    int stage = 1;  // 1, 2, or 0 for held-out evaluation data
    std::uint64_t seed = 0;
    int n_langs = 0;
    std::map<std::string, int> direction_counts;  // "src-tgt" -> translation examples
    std::map<int, int> general_counts;            // language -> general examples
    int translation_total = 0;
    int general_total = 0;

    int total() const { return translation_total + general_total; }
    bool operator==(const DatasetManifest&) const = default;
};

DatasetManifest summarize(const Dataset& data, int stage, std::uint64_t seed, int n_langs);
/// Throws DataError when counts disagree with the data.
void reconcile(const DatasetManifest& manifest, const Dataset& data);

std::vector<int> random_meaning(std::uint64_t seed, int base_vocab = kDefaultBaseVocab);

/// English-centric stage-1 set: n pivot->L and n L->pivot examples for every
/// non-pivot L, each with a uniformly drawn template.
Dataset build_stage1(std::span<const ToyLanguageSpec> specs, int n_per_direction, std::uint64_t seed);

/// Stage-2 mix: stage1_size / 5 examples, a quarter translation (spread over
/// the pivot-centric directions) and the rest general tasks balanced across
/// languages.
Dataset build_stage2(std::span<const ToyLanguageSpec> specs, int stage1_size, std::uint64_t seed);

/// Held-out translation examples for every ordered language pair, with
/// meanings disjoint from `exclude`.
Dataset build_eval(std::span<const ToyLanguageSpec> specs, int n_per_direction, std::uint64_t seed,
                   std::span<const Dataset> exclude);

/// Meanings of a multi-way parallel corpus, disjoint from `exclude`.
std::vector<std::vector<int>> parallel_meanings(int n, std::uint64_t seed, std::span<const Dataset> exclude,
                                                std::span<const ToyLanguageSpec> specs);

}  // namespace axlab::data
