#include "axlab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include <Eigen/Dense>

#include "axlab/dataset_io.hpp"
#include "axlab/errors.hpp"
#include "axlab/rng.hpp"

namespace axlab::probes {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

constexpr std::size_t kChunk = 128;
constexpr double kNormEps = 1e-12;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na <= kNormEps || nb <= kNormEps) throw DegenerateVectorError("alignment: zero-norm pooled representation");
    return dot / (na * nb);
}

std::vector<double> softmax_row(std::span<const float> logits) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(static_cast<double>(logits[i]) - mx);
        z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
}

// Per layer, the softmax over the vocabulary at the last row of every prompt.
std::vector<std::vector<std::vector<double>>> last_row_distributions(const model::ModelParams<float>& params,
                                                                     const model::ModelConfig& config,
                                                                     std::span<const std::vector<int>> prompts) {
    std::vector<std::vector<std::vector<double>>> out(static_cast<std::size_t>(config.n_layers + 1));
    ad::Tape<float> tape;
    for (std::size_t c0 = 0; c0 < prompts.size(); c0 += kChunk) {
        const std::size_t c1 = std::min(prompts.size(), c0 + kChunk);
        const auto batch = model::PackedBatch::pack(prompts.subspan(c0, c1 - c0));
        std::vector<int> last;
        for (const auto& seg : batch.segments) last.push_back(seg.start + seg.len - 1);
        tape.reset();
        const auto vars = model::bind(tape, params, false);
        const auto trace = model::forward_batch(vars, config, batch, std::span<const int>(last.data(), 1));
        for (int l = 0; l <= config.n_layers; ++l) {
            const auto rows = ad::gather_rows(trace.hidden[static_cast<std::size_t>(l)], last);
            const auto logits = model::unembed_rows(vars, rows).value();
            for (std::size_t r = 0; r < last.size(); ++r) {
                out[static_cast<std::size_t>(l)].push_back(softmax_row(
                    logits.data().subspan(r * static_cast<std::size_t>(config.vocab_size),
                                          static_cast<std::size_t>(config.vocab_size))));
            }
        }
    }
    return out;
}

}  // namespace

ParallelCorpus build_parallel_corpus(std::span<const data::ToyLanguageSpec> specs, int n, std::uint64_t seed,
                                     std::span<const data::Dataset> exclude) {
    if (n < 1) throw DataError("parallel corpus needs at least one sentence");
    const auto meanings = data::parallel_meanings(n, seed, exclude, specs);
    ParallelCorpus corpus;
    for (const auto& spec : specs) {
        auto& rows = corpus.sentences.emplace_back();
        for (const auto& m : meanings) rows.push_back(spec.render(m));
    }
    return corpus;
}

PooledReps pooled_reps(const model::ModelParams<float>& params, const model::ModelConfig& config,
                       const ParallelCorpus& corpus) {
    if (corpus.n_langs() < 2) throw DataError("alignment needs at least two languages");
    for (const auto& rows : corpus.sentences) {
        if (static_cast<int>(rows.size()) != corpus.size()) {
            throw DataError("parallel corpus has languages with different sentence counts");
        }
        for (const auto& s : rows) {
            if (s.empty()) throw DataError("parallel corpus contains an empty sentence");
        }
    }
    if (corpus.size() == 0) throw DataError("parallel corpus is empty");

    struct Item {
        int lang, index;
    };
    std::vector<Item> items;
    std::vector<std::vector<int>> seqs;
    for (int l = 0; l < corpus.n_langs(); ++l) {
        for (int i = 0; i < corpus.size(); ++i) {
            items.push_back({l, i});
            std::vector<int> s{data::Vocab::kBos};
            const auto& sent = corpus.sentences[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)];
            s.insert(s.end(), sent.begin(), sent.end());
            seqs.push_back(std::move(s));
        }
    }

    PooledReps reps(static_cast<std::size_t>(corpus.n_langs()),
                    std::vector<std::vector<std::vector<double>>>(static_cast<std::size_t>(corpus.size())));
    const auto d = static_cast<std::size_t>(config.d_model);
    ad::Tape<float> tape;
    for (std::size_t c0 = 0; c0 < seqs.size(); c0 += kChunk) {
        const std::size_t c1 = std::min(seqs.size(), c0 + kChunk);
        const auto batch = model::PackedBatch::pack(std::span<const std::vector<int>>(seqs).subspan(c0, c1 - c0));
        tape.reset();
        const auto vars = model::bind(tape, params, false);
        const int first_row = 0;
        const auto trace = model::forward_batch(vars, config, batch, std::span<const int>(&first_row, 1));
        for (std::size_t k = c0; k < c1; ++k) {
            const auto& seg = batch.segments[k - c0];
            auto& per_layer = reps[static_cast<std::size_t>(items[k].lang)][static_cast<std::size_t>(items[k].index)];
            for (int l = 0; l <= config.n_layers; ++l) {
                const auto h = trace.hidden[static_cast<std::size_t>(l)].value().data();
                std::vector<double> v(d, 0.0);
                for (int r = seg.start + 1; r < seg.start + seg.len; ++r) {
                    for (std::size_t j = 0; j < d; ++j) v[j] += h[static_cast<std::size_t>(r) * d + j];
                }
                for (auto& x : v) x /= static_cast<double>(seg.len - 1);
                per_layer.push_back(std::move(v));
            }
        }
    }
    return reps;
}

std::vector<double> alignment_from_reps(const PooledReps& reps) {
    if (reps.size() < 2) throw DataError("alignment needs at least two languages");
    const std::size_t n = reps.front().size();
    if (n == 0) throw DataError("alignment over an empty corpus");
    for (const auto& r : reps) {
        if (r.size() != n) throw DataError("alignment over a non-parallel corpus");
    }
    const std::size_t layers = reps.front().front().size();
    std::vector<double> curve(layers, 0.0);
    std::size_t count = 0;
    for (std::size_t a = 0; a < reps.size(); ++a) {
        for (std::size_t b = a + 1; b < reps.size(); ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t l = 0; l < layers; ++l) curve[l] += cosine(reps[a][i][l], reps[b][i][l]);
                ++count;
            }
        }
    }
    for (auto& v : curve) v /= static_cast<double>(count);
    return curve;
}

std::vector<double> alignment_curve(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                    const ParallelCorpus& corpus) {
    return alignment_from_reps(pooled_reps(params, config, corpus));
}

std::vector<std::array<double, 2>> pca_2d(std::span<const std::vector<double>> points) {
    if (points.size() < 2) throw DataError("pca_2d needs at least two points");
    const auto n = static_cast<Eigen::Index>(points.size());
    const auto d = static_cast<Eigen::Index>(points.front().size());
    if (d == 0) throw DataError("pca_2d on zero-dimensional points");
    Eigen::MatrixXd x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& p = points[static_cast<std::size_t>(i)];
        if (static_cast<Eigen::Index>(p.size()) != d) throw DimensionError("pca_2d: points differ in dimension");
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = p[static_cast<std::size_t>(j)];
    }
    x.rowwise() -= x.colwise().mean();
    if (x.cwiseAbs().maxCoeff() <= kNormEps) throw DegenerateVarianceError("pca_2d: all points are identical");
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw DegenerateVarianceError("pca_2d: eigendecomposition failed");

    Eigen::MatrixXd comps = Eigen::MatrixXd::Zero(d, 2);
    for (int c = 0; c < 2 && c < d; ++c) {
        Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - c);
        for (Eigen::Index j = 0; j < d; ++j) {
            if (std::abs(v(j)) > kNormEps) {
                if (v(j) < 0) v = -v;
                break;
            }
        }
        comps.col(c) = v;
    }
    const Eigen::MatrixXd proj = x * comps;
    std::vector<std::array<double, 2>> out(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = {proj(i, 0), proj(i, 1)};
    return out;
}

std::vector<ProjectionRow> projection_table(const PooledReps& reps, std::span<const int> layers, int n) {
    std::vector<ProjectionRow> rows;
    if (reps.empty()) return rows;
    const int count = std::min<int>(n, static_cast<int>(reps.front().size()));
    for (int layer : layers) {
        std::vector<std::vector<double>> pts;
        std::vector<ProjectionRow> meta;
        for (std::size_t lang = 0; lang < reps.size(); ++lang) {
            for (int i = 0; i < count; ++i) {
                const auto& per_layer = reps[lang][static_cast<std::size_t>(i)];
                if (layer < 0 || layer >= static_cast<int>(per_layer.size())) {
                    throw IndexError("projection layer " + std::to_string(layer) + " out of range");
                }
                pts.push_back(per_layer[static_cast<std::size_t>(layer)]);
                meta.push_back({i, static_cast<int>(lang), layer, 0.0, 0.0});
            }
        }
        const auto xy = pca_2d(pts);
        for (std::size_t k = 0; k < meta.size(); ++k) {
            meta[k].x = xy[k][0];
            meta[k].y = xy[k][1];
            rows.push_back(meta[k]);
        }
    }
    return rows;
}

std::vector<LensProbe> build_lens_probes(const data::Dataset& eval, std::span<const data::ToyLanguageSpec> specs,
                                         int max_probes) {
    std::vector<LensProbe> out;
    for (const auto& ex : eval) {
        if (static_cast<int>(out.size()) >= max_probes) break;
        if (ex.kind != data::ExampleKind::translation || ex.src_lang == 0 || ex.tgt_lang == 0) continue;
        const auto& tgt = specs[static_cast<std::size_t>(ex.tgt_lang)];
        const int first = ex.reference().front();
        const int word = tgt.inverse[static_cast<std::size_t>(first - tgt.script_offset)];
        const std::vector<int> one{word};
        out.push_back({ex.prompt(), specs[0].render(one).front()});
    }
    return out;
}

std::vector<std::vector<double>> lens_distributions(const model::ModelParams<float>& params,
                                                    const model::ModelConfig& config, std::span<const int> prompt) {
    const std::vector<std::vector<int>> prompts{std::vector<int>(prompt.begin(), prompt.end())};
    auto per_layer = last_row_distributions(params, config, prompts);
    std::vector<std::vector<double>> out;
    for (auto& l : per_layer) out.push_back(std::move(l.front()));
    return out;
}

std::vector<std::vector<double>> logit_lens(const model::ModelParams<float>& params, const model::ModelConfig& config,
                                            std::span<const LensProbe> probes) {
    std::vector<std::vector<int>> prompts;
    for (const auto& p : probes) {
        if (p.pivot_token < 0 || p.pivot_token >= config.vocab_size) {
            throw IndexError("logit lens pivot token " + std::to_string(p.pivot_token) + " outside vocabulary");
        }
        prompts.push_back(p.prompt);
    }
    const auto dists = last_row_distributions(params, config, prompts);
    std::vector<std::vector<double>> out(dists.size());
    for (std::size_t l = 0; l < dists.size(); ++l) {
        for (std::size_t k = 0; k < probes.size(); ++k) {
            out[l].push_back(dists[l][k][static_cast<std::size_t>(probes[k].pivot_token)]);
        }
    }
    return out;
}

Generator greedy_generator(const model::ModelParams<float>& params, const model::ModelConfig& config, int max_new) {
    return [&params, config, max_new](std::span<const std::vector<int>> prompts) {
        return model::generate_batch(params, config, prompts, max_new, data::Vocab::kEos);
    };
}

std::vector<int> extract_response(std::span<const int> generated) {
    const auto sep = std::find(generated.begin(), generated.end(), data::Vocab::kSep);
    if (sep == generated.end()) return {};
    const auto eos = std::find(sep + 1, generated.end(), data::Vocab::kEos);
    return std::vector<int>(sep + 1, eos);
}

std::vector<std::vector<int>> generate_responses(const data::Dataset& examples, const Generator& generator) {
    std::vector<std::vector<int>> prompts;
    for (const auto& ex : examples) prompts.push_back(ex.prompt());
    const auto generated = generator(prompts);
    if (generated.size() != prompts.size()) throw DataError("generator returned the wrong number of outputs");
    std::vector<std::vector<int>> out;
    for (const auto& g : generated) out.push_back(extract_response(g));
    return out;
}

bool is_off_target(std::span<const int> response, int intended_lang, const data::Vocab& vocab) {
    if (response.empty()) return true;
    const int lang = data::langid(response, vocab);
    return lang == data::kMixed || lang != intended_lang;
}

std::vector<DirectionOtr> otr_from_responses(const data::Dataset& examples,
                                             std::span<const std::vector<int>> responses, const data::Vocab& vocab) {
    if (examples.empty()) throw DataError("off-target ratio over an empty eval set");
    if (examples.size() != responses.size()) throw DataError("responses and examples differ in count");
    std::map<std::pair<int, int>, DirectionOtr> by_dir;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        auto& d = by_dir[{ex.src_lang, ex.tgt_lang}];
        d.src = ex.src_lang;
        d.tgt = ex.tgt_lang;
        ++d.n;
        if (is_off_target(responses[i], ex.tgt_lang, vocab)) ++d.off_target;
    }
    std::vector<DirectionOtr> out;
    for (auto& [key, d] : by_dir) {
        d.ratio = static_cast<double>(d.off_target) / static_cast<double>(d.n);
        out.push_back(d);
    }
    return out;
}

std::vector<DirectionOtr> off_target_ratio(const data::Dataset& examples, const data::Vocab& vocab,
                                           const Generator& generator) {
    if (examples.empty()) throw DataError("off-target ratio over an empty eval set");
    const auto responses = generate_responses(examples, generator);
    return otr_from_responses(examples, responses, vocab);
}

ProbeReport run_probes(const model::ModelParams<float>& params, const model::ModelConfig& config,
                       std::span<const data::ToyLanguageSpec> specs, const data::Dataset& eval,
                       const ProbeOptions& options, std::span<const data::Dataset> exclude) {
    ProbeReport report;
    const auto corpus =
        build_parallel_corpus(specs, options.n_sentences, derive_seed(options.seed, "probe-corpus"), exclude);
    const auto reps = pooled_reps(params, config, corpus);
    report.alignment = alignment_from_reps(reps);
    std::set<int> layer_set{0, config.align_layer, config.n_layers};
    const std::vector<int> layers(layer_set.begin(), layer_set.end());
    report.projection = projection_table(reps, layers, options.projection_sentences);
    const auto probes = build_lens_probes(eval, specs, options.max_lens_probes);
    report.logit_lens = logit_lens(params, config, probes);
    const data::Vocab vocab(static_cast<int>(specs.size()), specs.front().base_vocab);
    report.otr = off_target_ratio(eval, vocab, greedy_generator(params, config, options.max_new_tokens));
    return report;
}

ProbeReport compare_reports(const ProbeReport& a, const ProbeReport& b) {
    if (a.version != kReportVersion || b.version != kReportVersion) {
        throw ReportVersionError("report versions " + std::to_string(a.version) + " and " +
                                 std::to_string(b.version) + " are not supported (expected " +
                                 std::to_string(kReportVersion) + ")");
    }
    if (a.alignment.size() != b.alignment.size()) throw ReportVersionError("alignment curves differ in length");
    if (a.logit_lens.size() != b.logit_lens.size()) throw ReportVersionError("logit-lens layer counts differ");
    if (a.otr.size() != b.otr.size()) throw ReportVersionError("off-target tables differ in directions");
    if (a.projection.size() != b.projection.size()) throw ReportVersionError("projection tables differ in size");
    ProbeReport d;
    d.kind = "delta";
    for (std::size_t i = 0; i < a.alignment.size(); ++i) d.alignment.push_back(a.alignment[i] - b.alignment[i]);
    for (std::size_t l = 0; l < a.logit_lens.size(); ++l) {
        if (a.logit_lens[l].size() != b.logit_lens[l].size()) {
            throw ReportVersionError("logit-lens probe counts differ");
        }
        auto& row = d.logit_lens.emplace_back();
        for (std::size_t k = 0; k < a.logit_lens[l].size(); ++k) row.push_back(a.logit_lens[l][k] - b.logit_lens[l][k]);
    }
    for (std::size_t i = 0; i < a.otr.size(); ++i) {
        if (a.otr[i].src != b.otr[i].src || a.otr[i].tgt != b.otr[i].tgt) {
            throw ReportVersionError("off-target tables list different directions");
        }
        DirectionOtr o = a.otr[i];
        o.off_target -= b.otr[i].off_target;
        o.ratio -= b.otr[i].ratio;
        d.otr.push_back(o);
    }
    for (std::size_t i = 0; i < a.projection.size(); ++i) {
        const auto& pa = a.projection[i];
        const auto& pb = b.projection[i];
        if (pa.id != pb.id || pa.lang != pb.lang || pa.layer != pb.layer) {
            throw ReportVersionError("projection tables list different points");
        }
        d.projection.push_back({pa.id, pa.lang, pa.layer, pa.x - pb.x, pa.y - pb.y});
    }
    return d;
}

ordered_json report_to_json(const ProbeReport& r) {
    ordered_json j;
    j["version"] = r.version;
    j["kind"] = r.kind;
    j["alignment"] = r.alignment;
    ordered_json otr = ordered_json::array();
    for (const auto& o : r.otr) {
        otr.push_back(ordered_json{{"src", o.src}, {"tgt", o.tgt}, {"n", o.n}, {"off_target", o.off_target},
                                   {"ratio", o.ratio}});
    }
    j["otr"] = otr;
    j["logit_lens"] = r.logit_lens;
    ordered_json proj = ordered_json::array();
    for (const auto& p : r.projection) {
        proj.push_back(ordered_json{{"id", p.id}, {"lang", p.lang}, {"layer", p.layer}, {"x", p.x}, {"y", p.y}});
    }
    j["projection"] = proj;
    return j;
}

ProbeReport report_from_json(const json& j) {
    ProbeReport r;
    try {
        r.version = j.at("version").get<int>();
        if (r.version != kReportVersion) {
            throw ReportVersionError("report version " + std::to_string(r.version) + " is not supported");
        }
        r.kind = j.at("kind").get<std::string>();
        r.alignment = j.at("alignment").get<std::vector<double>>();
        for (const auto& o : j.at("otr")) {
            r.otr.push_back({o.at("src").get<int>(), o.at("tgt").get<int>(), o.at("n").get<int>(),
                             o.at("off_target").get<int>(), o.at("ratio").get<double>()});
        }
        r.logit_lens = j.at("logit_lens").get<std::vector<std::vector<double>>>();
        for (const auto& p : j.at("projection")) {
            r.projection.push_back({p.at("id").get<int>(), p.at("lang").get<int>(), p.at("layer").get<int>(),
                                    p.at("x").get<double>(), p.at("y").get<double>()});
        }
    } catch (const json::exception& e) {
        throw ReportVersionError(std::string("malformed probe report: ") + e.what());
    }
    return r;
}

std::string alignment_csv(const ProbeReport& r) {
    std::string out = "layer,score\n";
    for (std::size_t l = 0; l < r.alignment.size(); ++l) out += std::to_string(l) + "," + fmt(r.alignment[l]) + "\n";
    return out;
}

std::string logitlens_csv(const ProbeReport& r) {
    std::string out = "layer,example,prob\n";
    for (std::size_t l = 0; l < r.logit_lens.size(); ++l) {
        for (std::size_t k = 0; k < r.logit_lens[l].size(); ++k) {
            out += std::to_string(l) + "," + std::to_string(k) + "," + fmt(r.logit_lens[l][k]) + "\n";
        }
    }
    return out;
}

std::string otr_csv(const ProbeReport& r) {
    std::string out = "src,tgt,ratio\n";
    for (const auto& o : r.otr) out += std::to_string(o.src) + "," + std::to_string(o.tgt) + "," + fmt(o.ratio) + "\n";
    return out;
}

std::string projection_csv(const ProbeReport& r) {
    std::string out = "id,lang,layer,x,y\n";
    for (const auto& p : r.projection) {
        out += std::to_string(p.id) + "," + std::to_string(p.lang) + "," + std::to_string(p.layer) + "," + fmt(p.x) +
               "," + fmt(p.y) + "\n";
    }
    return out;
}

void write_report(const std::filesystem::path& dir, const ProbeReport& report) {
    std::filesystem::create_directories(dir);
    data::write_text(dir / "alignment.csv", alignment_csv(report));
    data::write_text(dir / "logitlens.csv", logitlens_csv(report));
    data::write_text(dir / "otr.csv", otr_csv(report));
    data::write_text(dir / "proj.csv", projection_csv(report));
    data::write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
}

ProbeReport read_report(const std::filesystem::path& json_path) {
    const auto text = data::read_text(json_path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ReportVersionError("cannot parse " + json_path.string() + ": " + e.what());
    }
    return report_from_json(j);
}

}  // namespace axlab::probes
