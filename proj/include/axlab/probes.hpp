#pragma once

// Representation diagnostics over a frozen model: per-layer cross-lingual
// alignment, 2-D PCA projections, logit-lens pivot probabilities and
// off-target ratios, bundled into a ProbeReport.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "axlab/model.hpp"
#include "axlab/toy_data.hpp"

namespace axlab::probes {

inline constexpr int kReportVersion = 1;

/// sentences[lang][i] is sentence i rendered in language `lang`; all rows align.
struct ParallelCorpus {
    std::vector<std::vector<std::vector<int>>> sentences;

    int n_langs() const { return static_cast<int>(sentences.size()); }
    int size() const { return sentences.empty() ? 0 : static_cast<int>(sentences.front().size()); }
};

ParallelCorpus build_parallel_corpus(std::span<const data::ToyLanguageSpec> specs, int n, std::uint64_t seed,
                                     std::span<const data::Dataset> exclude = {});

/// reps[lang][sentence][layer] -> d-vector.
using PooledReps = std::vector<std::vector<std::vector<std::vector<double>>>>;

/// Feeds BOS + sentence and mean-pools the sentence rows at every layer.
PooledReps pooled_reps(const model::ModelParams<float>& params, const model::ModelConfig& config,
                       const ParallelCorpus& corpus);

/// Per layer: mean cosine over unordered language pairs and sentences.
std::vector<double> alignment_from_reps(const PooledReps& reps);
std::vector<double> alignment_curve(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                    const ParallelCorpus& corpus);

/// Projection onto the top two principal components of the centered points.
/// Each component's first loading with magnitude above 1e-12 is made positive.
std::vector<std::array<double, 2>> pca_2d(std::span<const std::vector<double>> points);

struct ProjectionRow {
    int id = 0;
    int lang = 0;
    int layer = 0;
    double x = 0;
    double y = 0;
};

/// PCA over all languages' pooled representations of the first `n` sentences, per layer.
std::vector<ProjectionRow> projection_table(const PooledReps& reps, std::span<const int> layers, int n);

struct LensProbe {
    std::vector<int> prompt;
    int pivot_token = 0;
};

/// Non-pivot to non-pivot translation prompts; the pivot token is the pivot
/// language's rendering of the first target word.
std::vector<LensProbe> build_lens_probes(const data::Dataset& eval, std::span<const data::ToyLanguageSpec> specs,
                                         int max_probes);

/// Softmax of the final-norm + unembedding of every layer's last prompt row:
/// result[layer] is a full distribution, layers 0..n_layers.
std::vector<std::vector<double>> lens_distributions(const model::ModelParams<float>& params,
                                                    const model::ModelConfig& config, std::span<const int> prompt);

/// result[layer][probe] = probability of the probe's pivot token.
std::vector<std::vector<double>> logit_lens(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                            std::span<const LensProbe> probes);

/// Prompts -> full generated sequences (prompt included).
using Generator = std::function<std::vector<std::vector<int>>(std::span<const std::vector<int>>)>;

Generator greedy_generator(const model::ModelParams<float>& params, const model::ModelConfig& config, int max_new);

/// Tokens after the first separator, up to but excluding the first EOS.
std::vector<int> extract_response(std::span<const int> generated);

/// One response per example, extracted from the generator's output.
std::vector<std::vector<int>> generate_responses(const data::Dataset& examples, const Generator& generator);

struct DirectionOtr {
    int src = 0;
    int tgt = 0;
    int n = 0;
    int off_target = 0;
    double ratio = 0;
};

/// Off-target if langid(response) differs from the intended language; mixed
/// and empty responses count as off-target.
bool is_off_target(std::span<const int> response, int intended_lang, const data::Vocab& vocab);

std::vector<DirectionOtr> otr_from_responses(const data::Dataset& examples,
                                             std::span<const std::vector<int>> responses, const data::Vocab& vocab);
std::vector<DirectionOtr> off_target_ratio(const data::Dataset& examples, const data::Vocab& vocab,
                                           const Generator& generator);

struct ProbeReport {
    int version = kReportVersion;
    std::string kind = "probe";  // "probe" or "delta"
    std::vector<double> alignment;
    std::vector<DirectionOtr> otr;
    std::vector<std::vector<double>> logit_lens;
    std::vector<ProjectionRow> projection;
};

struct ProbeOptions {
    int n_sentences = 200;
    int projection_sentences = 50;
    int max_lens_probes = 200;
    int max_new_tokens = 16;
    std::uint64_t seed = 0;
};

ProbeReport run_probes(const model::ModelParams<float>& params, const model::ModelConfig& config,
                       std::span<const data::ToyLanguageSpec> specs, const data::Dataset& eval,
                       const ProbeOptions& options, std::span<const data::Dataset> exclude = {});

/// Element-wise a - b. Throws ReportVersionError on version or layout mismatch.
ProbeReport compare_reports(const ProbeReport& a, const ProbeReport& b);

nlohmann::ordered_json report_to_json(const ProbeReport& report);
ProbeReport report_from_json(const nlohmann::json& j);

std::string alignment_csv(const ProbeReport& report);
std::string logitlens_csv(const ProbeReport& report);
std::string otr_csv(const ProbeReport& report);
std::string projection_csv(const ProbeReport& report);

/// alignment.csv, logitlens.csv, otr.csv, proj.csv and report.json under `dir`.
void write_report(const std::filesystem::path& dir, const ProbeReport& report);
ProbeReport read_report(const std::filesystem::path& json_path);

}  // namespace axlab::probes
