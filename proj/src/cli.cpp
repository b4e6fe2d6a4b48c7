#include "axlab/cli.hpp"

#include <optional>
#include <string>

#include "CLI11.hpp"

#include "axlab/checkpoint.hpp"
#include "axlab/dataset_io.hpp"
#include "axlab/errors.hpp"
#include "axlab/kernels.hpp"
#include "axlab/metrics.hpp"
#include "axlab/probes.hpp"
#include "axlab/rng.hpp"
#include "axlab/train.hpp"

namespace axlab::cli {

namespace fs = std::filesystem;

namespace {

struct GenArgs {
    std::string out;
    std::string config;
    int langs = 0;
    int n_per_direction = 0;
    int n_eval = 0;
    int base_vocab = 0;
    std::uint64_t seed = 0;
    bool force = false;
};

struct TrainArgs {
    int stage = 1;
    std::string data;
    std::string out;
    std::string config;
    std::string resume;
    std::string loss_log;
    bool no_ctr = false;
    bool no_lam = false;
    std::uint64_t seed = 0;
    int epochs = 0;
    int batch_size = 0;
    double lr = 0;
    double alpha1 = 0;
    double alpha2 = 0;
    double tau = 0;
    double weight_decay = 0;
    std::int64_t max_steps = 0;
    bool cosine = false;
    bool quiet = false;
};

struct EvalArgs {
    std::string ckpt;
    std::string data;
    std::string out;
    std::string config;
    int max_new = 0;
    bool oracle = false;
};

struct ProbeArgs {
    std::string ckpt;
    std::string data;
    std::string out;
    std::string config;
    std::uint64_t seed = 0;
    int n_sentences = 0;
};

struct CompareArgs {
    std::string a;
    std::string b;
    std::string out;
};

bool given(const CLI::Option* opt) { return opt != nullptr && opt->count() > 0; }

config::RunConfig base_config(const std::string& path) {
    return path.empty() ? config::RunConfig{} : config::RunConfig::load(path);
}

fs::path resolve_data(const std::string& path, const std::string& file) {
    const fs::path p(path);
    return fs::is_directory(p) ? p / file : p;
}

void print_config(std::ostream& out, const config::RunConfig& cfg) {
    out << "effective config: " << cfg.to_json().dump() << "\n";
}

int cmd_gen_data(const GenArgs& a, const CLI::App& sub, std::ostream& out) {
    auto cfg = base_config(a.config);
    if (given(sub.get_option("--langs"))) cfg.languages.n_langs = a.langs;
    if (given(sub.get_option("--n-per-direction"))) cfg.languages.n_per_direction = a.n_per_direction;
    if (given(sub.get_option("--n-eval"))) cfg.languages.n_eval_per_direction = a.n_eval;
    if (given(sub.get_option("--base-vocab"))) cfg.languages.base_vocab = a.base_vocab;
    if (given(sub.get_option("--seed"))) cfg.seed = a.seed;
    if (cfg.languages.n_langs < 2) throw ConfigError("at least two languages are required");
    print_config(out, cfg);

    const fs::path dir(a.out);
    if (fs::exists(dir) && !fs::is_empty(dir) && !a.force) {
        throw IoError("output directory " + dir.string() + " is not empty; pass --force to overwrite");
    }
    const auto gen = generate_data(cfg.languages, cfg.seed);
    write_generated(dir, gen);
    out << "wrote " << gen.stage1.size() << " stage-1, " << gen.stage2.size() << " stage-2 and " << gen.eval.size()
        << " eval examples to " << dir.string() << "\n";
    return kOk;
}

int cmd_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out, std::ostream& err) {
    auto cfg = base_config(a.config);
    auto& section = a.stage == 1 ? cfg.train_stage1 : cfg.train_stage2;
    if (given(sub.get_option("--seed"))) cfg.seed = a.seed;
    if (given(sub.get_option("--epochs"))) section.epochs = a.epochs;
    if (given(sub.get_option("--batch-size"))) section.batch_size = a.batch_size;
    if (given(sub.get_option("--lr"))) section.learning_rate = a.lr;
    if (given(sub.get_option("--alpha1"))) section.alpha1 = a.alpha1;
    if (given(sub.get_option("--alpha2"))) section.alpha2 = a.alpha2;
    if (given(sub.get_option("--tau"))) section.tau = a.tau;
    if (given(sub.get_option("--weight-decay"))) section.weight_decay = a.weight_decay;
    if (given(sub.get_option("--max-steps"))) section.max_steps = a.max_steps;
    if (a.cosine) section.cosine_decay = true;
    if (a.no_ctr) section.disable_ctr = true;
    if (a.no_lam) section.disable_lam = true;
    print_config(out, cfg);

    const auto loaded = data::load_dataset(resolve_data(a.data, "stage" + std::to_string(a.stage) + ".jsonl"));
    const data::Vocab vocab(static_cast<int>(loaded.specs.size()), loaded.specs.front().base_vocab);
    const auto model_config = cfg.model.to_model(vocab.size());
    const auto tc = section.to_train(a.stage, cfg.seed);

    train::TrainState state;
    if (!a.resume.empty()) {
        state = ckpt::load_checkpoint(a.resume, model_config);
        out << "resuming from " << a.resume << " (stage " << state.stage << ", step " << state.step << ")\n";
    } else {
        if (a.stage == 2) {
            out << "notice: stage 2 without --resume starts from a fresh initialization "
                   "(instruction-tuning-only baseline, no alignment stage)\n";
        }
        state = train::initial_state(model_config, cfg.seed);
    }

    const auto progress = [&](const train::LossRecord& r) {
        if (!a.quiet && r.step % 10 == 0) {
            err << "step " << r.step << " ntp " << r.ntp << " ctr " << r.ctr << " lam " << r.lam << " combined "
                << r.combined << "\n";
        }
    };
    auto result = a.stage == 1 ? train::train_stage1(loaded.data, tc, std::move(state), progress)
                               : train::train_stage2(std::move(state), loaded.data, tc, progress);
    ckpt::save_checkpoint(result.state, a.out);
    fs::path log_path = a.loss_log.empty() ? fs::path(a.out + ".loss.csv") : fs::path(a.loss_log);
    data::write_text(log_path, train::loss_csv(result.log));
    if (result.unbalanced_lam_batches > 0) {
        err << "warning: " << result.unbalanced_lam_batches << " batches could not form balanced LAM pairs\n";
    }
    out << "trained " << result.log.size() << " steps; checkpoint " << a.out << ", loss log " << log_path.string()
        << "\n";
    return kOk;
}

int cmd_eval(const EvalArgs& a, const CLI::App& sub, std::ostream& out) {
    auto cfg = base_config(a.config);
    if (given(sub.get_option("--max-new"))) cfg.eval.max_new_tokens = a.max_new;
    print_config(out, cfg);
    const auto loaded = data::load_dataset(resolve_data(a.data, "eval.jsonl"));
    const data::Vocab vocab(static_cast<int>(loaded.specs.size()), loaded.specs.front().base_vocab);

    std::vector<std::vector<int>> responses;
    if (a.oracle) {
        responses = probes::generate_responses(loaded.data, metrics::reference_generator(loaded.data));
    } else {
        if (a.ckpt.empty()) throw ConfigError("eval needs --ckpt unless --oracle is given");
        const auto state = ckpt::load_checkpoint(a.ckpt, cfg.model.to_model(vocab.size()));
        responses = probes::generate_responses(
            loaded.data, probes::greedy_generator(state.model, state.model_config, cfg.eval.max_new_tokens));
    }
    const auto results = metrics::evaluate_responses(loaded.data, responses, vocab);

    const auto& specs = loaded.specs;
    const auto identity = [&](const metrics::EvalResult& r) {
        return specs[static_cast<std::size_t>(r.src)].word_order == data::WordOrder::identity &&
               specs[static_cast<std::size_t>(r.tgt)].word_order == data::WordOrder::identity;
    };
    auto json = metrics::eval_json(results);
    json["summary"] = {
        {"exact_all", metrics::pooled_exact_match(results, [](const auto&) { return true; })},
        {"exact_identity_order", metrics::pooled_exact_match(results, identity)},
        {"exact_identity_order_pivot",
         metrics::pooled_exact_match(results, [&](const auto& r) { return identity(r) && (r.src == 0 || r.tgt == 0); })}};

    const fs::path dir(a.out);
    fs::create_directories(dir);
    data::write_text(dir / "eval.csv", metrics::eval_csv(results));
    data::write_text(dir / "eval.json", json.dump(2) + "\n");
    out << metrics::eval_csv(results);
    out << "summary: " << json["summary"].dump() << "\n";
    return kOk;
}

int cmd_probe(const ProbeArgs& a, const CLI::App& sub, std::ostream& out) {
    auto cfg = base_config(a.config);
    if (given(sub.get_option("--seed"))) cfg.seed = a.seed;
    if (given(sub.get_option("--n-sentences"))) cfg.probes.n_sentences = a.n_sentences;
    print_config(out, cfg);
    const auto eval_path = resolve_data(a.data, "eval.jsonl");
    const auto loaded = data::load_dataset(eval_path);
    const data::Vocab vocab(static_cast<int>(loaded.specs.size()), loaded.specs.front().base_vocab);
    std::vector<data::Dataset> exclude{loaded.data};
    for (const char* name : {"stage1.jsonl", "stage2.jsonl"}) {
        const auto p = eval_path.parent_path() / name;
        if (fs::exists(p)) exclude.push_back(data::read_jsonl(p));
    }
    const auto state = ckpt::load_checkpoint(a.ckpt, cfg.model.to_model(vocab.size()));
    probes::ProbeOptions opt;
    opt.n_sentences = cfg.probes.n_sentences;
    opt.projection_sentences = cfg.probes.projection_sentences;
    opt.max_lens_probes = cfg.probes.max_lens_probes;
    opt.max_new_tokens = cfg.eval.max_new_tokens;
    opt.seed = cfg.seed;
    const auto report = probes::run_probes(state.model, state.model_config, loaded.specs, loaded.data, opt, exclude);
    probes::write_report(a.out, report);
    out << probes::alignment_csv(report);
    out << "wrote probe report to " << a.out << "\n";
    return kOk;
}

fs::path report_path(const std::string& p) {
    const fs::path path(p);
    return fs::is_directory(path) ? path / "report.json" : path;
}

int cmd_compare(const CompareArgs& a, std::ostream& out) {
    const auto ra = probes::read_report(report_path(a.a));
    const auto rb = probes::read_report(report_path(a.b));
    const auto delta = probes::compare_reports(ra, rb);
    probes::write_report(a.out, delta);
    out << probes::alignment_csv(delta);
    out << "wrote delta report to " << a.out << "\n";
    return kOk;
}

}  // namespace

GeneratedData generate_data(const config::LanguagesSection& languages, std::uint64_t seed) {
    if (languages.n_langs < 2) throw ConfigError("at least two languages are required");
    GeneratedData g;
    g.seed = seed;
    g.base_vocab = languages.base_vocab;
    const auto data_seed = derive_seed(seed, "data");
    g.specs = data::gen_languages(languages.n_langs, derive_seed(data_seed, "languages"), languages.base_vocab);
    g.stage1 = data::build_stage1(g.specs, languages.n_per_direction, derive_seed(data_seed, "stage1"));
    g.stage2 = data::build_stage2(g.specs, static_cast<int>(g.stage1.size()), derive_seed(data_seed, "stage2"));
    const std::vector<data::Dataset> exclude{g.stage1, g.stage2};
    g.eval = data::build_eval(g.specs, languages.n_eval_per_direction, derive_seed(data_seed, "eval"), exclude);
    return g;
}

void write_generated(const fs::path& dir, const GeneratedData& g) {
    fs::create_directories(dir);
    const int k = static_cast<int>(g.specs.size());
    data::write_jsonl(dir / "stage1.jsonl", g.stage1);
    data::write_jsonl(dir / "stage2.jsonl", g.stage2);
    data::write_jsonl(dir / "eval.jsonl", g.eval);
    data::DataBundle bundle;
    bundle.seed = g.seed;
    bundle.base_vocab = g.base_vocab;
    bundle.languages = g.specs;
    bundle.files["stage1.jsonl"] = data::summarize(g.stage1, 1, g.seed, k);
    bundle.files["stage2.jsonl"] = data::summarize(g.stage2, 2, g.seed, k);
    bundle.files["eval.jsonl"] = data::summarize(g.eval, 0, g.seed, k);
    data::write_bundle(dir / "manifest.json", bundle);
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    kernels::configure_threads_from_env();
    CLI::App app{"axlab: two-stage cross-lingual representation alignment on synthetic cipher languages.\n"
                 "Worker threads are capped by AXLAB_THREADS (default 1)."};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Print help for every command");

    GenArgs ga;
    auto* gen = app.add_subcommand("gen-data", "Generate languages, stage-1/stage-2 training sets and a held-out eval set");
    gen->add_option("--out", ga.out, "Output directory")->required();
    gen->add_option("--langs", ga.langs, "Number of toy languages, language 0 is the pivot (default 4)")
        ->check(CLI::Range(2, 64));
    gen->add_option("--n-per-direction", ga.n_per_direction,
                    "Stage-1 examples per pivot-centric direction (desk-scale default 2000)")
        ->check(CLI::PositiveNumber);
    gen->add_option("--n-eval", ga.n_eval, "Held-out examples per ordered language pair (default 50)")
        ->check(CLI::PositiveNumber);
    gen->add_option("--base-vocab", ga.base_vocab, "Words per language script (default 64)")->check(CLI::Range(13, 4096));
    gen->add_option("--seed", ga.seed, "Root seed; data uses the 'data' sub-seed (default 0)");
    gen->add_option("--config", ga.config, "Run configuration JSON");
    gen->add_flag("--force", ga.force, "Overwrite a non-empty output directory");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Run training stage 1 (NTP + CTR + LAM) or stage 2 (NTP only)");
    tr->add_option("--stage", ta.stage, "1 = alignment pre-training, 2 = instruction tuning")
        ->required()
        ->check(CLI::IsMember({1, 2}));
    tr->add_option("--data", ta.data, "Dataset JSONL or the directory gen-data wrote")->required();
    tr->add_option("--out", ta.out, "Checkpoint to write")->required();
    tr->add_option("--config", ta.config, "Run configuration JSON");
    tr->add_option("--resume", ta.resume, "Checkpoint to continue from (stage 2 normally resumes stage 1)");
    tr->add_option("--loss-log", ta.loss_log, "Loss CSV path (default <out>.loss.csv)");
    tr->add_flag("--no-ctr", ta.no_ctr, "Ablation: drop the contrastive alignment term");
    tr->add_flag("--no-lam", ta.no_lam, "Ablation: drop the language-matching term");
    tr->add_option("--seed", ta.seed, "Root seed for init, batching and LAM pairing (default 0)");
    tr->add_option("--epochs", ta.epochs, "Epochs for this stage (method default 2)")->check(CLI::PositiveNumber);
    tr->add_option("--batch-size", ta.batch_size, "Examples per step (method default 128)")->check(CLI::PositiveNumber);
    tr->add_option("--lr", ta.lr, "AdamW learning rate (desk-scale choice 3e-4; large pretrained models use ~2e-6)")
        ->check(CLI::PositiveNumber);
    tr->add_option("--alpha1", ta.alpha1, "Weight of the contrastive term (method default 0.3)");
    tr->add_option("--alpha2", ta.alpha2, "Weight of the language-matching term (method default 0.4)");
    tr->add_option("--tau", ta.tau, "Contrastive temperature (method default 0.1)")->check(CLI::PositiveNumber);
    tr->add_option("--weight-decay", ta.weight_decay, "Decoupled weight decay (desk-scale choice 0.01)");
    tr->add_option("--max-steps", ta.max_steps, "Stop after this many steps (default: no limit)");
    tr->add_flag("--cosine", ta.cosine, "Cosine learning-rate decay (default constant rate)");
    tr->add_flag("--quiet", ta.quiet, "Suppress per-step progress");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Greedy-decode the eval set and report exact match, token accuracy, BLEU, OTR");
    ev->add_option("--ckpt", ea.ckpt, "Checkpoint to evaluate");
    ev->add_option("--data", ea.data, "eval.jsonl or the directory gen-data wrote")->required();
    ev->add_option("--out", ea.out, "Directory for eval.csv and eval.json")->required();
    ev->add_option("--config", ea.config, "Run configuration JSON");
    ev->add_option("--max-new", ea.max_new, "Generated token limit (default 16)")->check(CLI::PositiveNumber);
    ev->add_flag("--oracle", ea.oracle, "Debug: score the references themselves instead of model output");

    ProbeArgs pa;
    auto* pr = app.add_subcommand("probe", "Alignment curve, PCA projection, logit lens and off-target ratio");
    pr->add_option("--ckpt", pa.ckpt, "Checkpoint to probe")->required();
    pr->add_option("--data", pa.data, "Directory gen-data wrote (or its eval.jsonl)")->required();
    pr->add_option("--out", pa.out, "Report directory")->required();
    pr->add_option("--config", pa.config, "Run configuration JSON");
    pr->add_option("--seed", pa.seed, "Seed for the probe corpus (default 0)");
    pr->add_option("--n-sentences", pa.n_sentences, "Parallel sentences for the alignment curve (default 200)")
        ->check(CLI::PositiveNumber);

    CompareArgs ca;
    auto* cmp = app.add_subcommand("compare", "Element-wise difference a - b of two probe reports");
    cmp->add_option("--a", ca.a, "First report.json or report directory")->required();
    cmp->add_option("--b", ca.b, "Second report.json or report directory")->required();
    cmp->add_option("--out", ca.out, "Directory for the delta report")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kOk : kUsage;
    }

    try {
        if (*gen) return cmd_gen_data(ga, *gen, out);
        if (*tr) return cmd_train(ta, *tr, out, err);
        if (*ev) return cmd_eval(ea, *ev, out);
        if (*pr) return cmd_probe(pa, *pr, out);
        if (*cmp) return cmd_compare(ca, out);
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const InputError& e) {
        err << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const DivergenceError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const DegenerateVectorError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const DegenerateVarianceError& e) {
        err << "numerical failure: " << e.what() << "\n";
        return kNumerical;
    } catch (const ckpt::CheckpointError& e) {
        err << "checkpoint error: " << e.what() << "\n";
        return kIo;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    }
    return kUsage;
}

}  // namespace axlab::cli
