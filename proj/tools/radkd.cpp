#include <csignal>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <thread>

#include <pthread.h>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "radkd/corpus.hpp"
#include "radkd/error.hpp"
#include "radkd/evaluation.hpp"
#include "radkd/inference.hpp"
#include "radkd/teacher.hpp"
#include "radkd/training.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;
using namespace radkd;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

struct Common {
    std::string runs_dir = "runs";
    std::string run_dir;  // overrides runs_dir/<timestamp>-seed<seed>
    std::string log_level = "info";
};

struct SynthOpts {
    SynthSpec spec;
    std::vector<double> frac_range;
    std::string out;
};

struct LabelOpts {
    std::string in, out, cache;
    std::string level = "sentence";
    std::string teacher_url;
    bool mock = false;
    double mock_disagreement = 0.0;
    std::uint64_t seed = 0;
    TeacherOptions teacher;
    std::size_t parallelism = 4;
};

struct TrainOpts {
    std::string data, out;
    std::string level = "sentence";
    std::string encoder = "attention";
    TrainConfig cfg;
};

struct EvalOpts {
    std::string checkpoint, data;
};

struct CompareOpts {
    std::vector<std::string> dkd, skd;
    std::string data;
};

struct ServeOpts {
    std::string checkpoint, addr = "127.0.0.1:8080", eval_report;
    std::optional<double> threshold;
    ServeOptions server;
};

void write_file(const fs::path& p, std::string_view bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("IOError", "cannot write " + p.string());
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw ConfigError(std::string(what) + " path is required");
    if (!fs::is_regular_file(path)) throw ConfigError(fmt::format("{} not found: {}", what, path));
}

fs::path make_run_dir(const Common& c, std::string_view cmd, std::uint64_t seed) {
    fs::path dir;
    if (!c.run_dir.empty()) {
        dir = c.run_dir;
    } else {
        const std::time_t now = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&now, &tm);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
        const std::string base = fmt::format("{}-{}-seed{}", stamp, cmd, seed);
        dir = fs::path(c.runs_dir) / base;
        for (int k = 2; fs::exists(dir); ++k) dir = fs::path(c.runs_dir) / fmt::format("{}-{}", base, k);
    }
    fs::create_directories(dir);
    return dir;
}

void record_config(const CLI::App& app, const fs::path& dir) {
    const std::string cfg = app.config_to_str(true, false);
    write_file(dir / "config.toml", cfg);
    spdlog::info("run directory {}", dir.string());
    spdlog::debug("effective config:\n{}", cfg);
}

// --------------------------------------------------------------------------

int cmd_synth(const CLI::App& app, const Common& c, SynthOpts& o) {
    if (!o.frac_range.empty()) o.spec.abnormal_fraction_range = std::pair{o.frac_range[0], o.frac_range[1]};
    o.spec.validate();
    const auto dir = make_run_dir(c, "synth", o.spec.seed);
    record_config(app, dir);
    const auto ds = generate_synthetic(o.spec);
    const fs::path out = o.out.empty() ? dir / "dataset.jsonl" : fs::path(o.out);
    save_dataset(ds, out);
    const auto n = ds.counts();
    spdlog::info("wrote {} documents ({} abnormal, {} normal) to {}", n.documents, n.abnormal_documents,
                 n.normal_documents, out.string());
    return 0;
}

std::string retention_line(const char* what, std::size_t kept, std::size_t total) {
    const double pct = total ? 100.0 * static_cast<double>(kept) / static_cast<double>(total) : 0.0;
    return fmt::format("{}: {} of {} retained ({:.2f}%)", what, kept, total, pct);
}

int cmd_label(const CLI::App& app, const Common& c, LabelOpts& o) {
    require_file(o.in, "input dataset");
    const auto level = parse_level(o.level);
    if (!level) throw ConfigError("level must be document or sentence");

    std::shared_ptr<ChatEndpoint> endpoint;
    if (o.mock) {
        if (!(o.mock_disagreement >= 0.0 && o.mock_disagreement <= 1.0)) {
            throw ConfigError("mock disagreement rate must lie in [0,1]");
        }
        endpoint = std::make_shared<MockTeacher>(o.seed, o.mock_disagreement);
    } else {
        if (o.teacher_url.empty()) throw ConfigError("either --teacher-url or --mock is required");
        const char* key = std::getenv("TEACHER_API_KEY");
        if (!key || !*key) throw ConfigError("TEACHER_API_KEY is not set");
        endpoint = std::make_shared<HttpChatEndpoint>(o.teacher_url, key);
    }

    const auto dir = make_run_dir(c, "label", o.seed);
    record_config(app, dir);
    const auto input = load_dataset(o.in);
    auto cache = std::make_shared<LabelCache>(o.cache.empty() ? dir / "teacher_cache.jsonl" : fs::path(o.cache));
    TeacherClient teacher(endpoint, cache, o.teacher);

    LabeledDataset labeled;
    RetentionStats stats;
    if (*level == Level::Sentence) {
        TermFrequencyEmbedder embedder;
        const auto verdicts = label_reports(input.documents(), teacher, embedder, {o.parallelism});
        auto filtered = filter_documents(verdicts);
        labeled = std::move(filtered.dataset);
        stats = filtered.stats;
    } else {
        std::vector<LabeledDocument> docs;
        for (const auto& d : input.documents()) {
            const auto reply = teacher.query_document(d.report);
            LabeledDocument out;
            out.report = d.report;
            out.split = d.split;
            out.doc_label = reply.label == TeacherLabel::Abnormal ? DocLabel::Abnormal : DocLabel::Normal;
            docs.push_back(std::move(out));
            stats.sentences_total += d.report.sentences.size();
        }
        stats.documents_total = stats.documents_kept = docs.size();
        stats.sentences_kept = stats.sentences_total;
        labeled = LabeledDataset(std::move(docs));
    }

    const fs::path out = o.out.empty() ? dir / "labeled.jsonl" : fs::path(o.out);
    save_dataset(labeled, out);
    const ojson js{{"documents_total", stats.documents_total},
                   {"documents_kept", stats.documents_kept},
                   {"sentences_total", stats.sentences_total},
                   {"sentences_kept", stats.sentences_kept},
                   {"network_calls", teacher.network_calls()}};
    write_file(dir / "retention.json", js.dump(2) + "\n");
    std::cout << retention_line("documents", stats.documents_kept, stats.documents_total) << '\n'
              << retention_line("sentences", stats.sentences_kept, stats.sentences_total) << '\n';
    return 0;
}

int cmd_train(const CLI::App& app, const Common& c, TrainOpts& o) {
    require_file(o.data, "dataset");
    const auto level = parse_level(o.level);
    if (!level) throw ConfigError("level must be document or sentence");
    const auto enc = parse_encoder(o.encoder);
    if (!enc) throw ConfigError("encoder must be attention or meanpool");
    o.cfg.level = *level;
    o.cfg.encoder = *enc;
    o.cfg.validate();

    const auto ds = load_dataset(o.data);
    if (o.cfg.level == Level::Sentence && !ds.has_sentence_labels()) {
        throw ConfigError("sentence-level training needs sentence labels; this dataset has document labels only");
    }
    if (ds.subset(Split::Train).empty()) throw ConfigError("dataset has no train split");

    const auto dir = make_run_dir(c, "train", o.cfg.seed);
    record_config(app, dir);
    auto result = train(ds, o.cfg, [](const EpochMetrics& m) {
        spdlog::info("epoch {:2d} loss {:.5f} ce {:.5f} supcon {:.5f}", m.epoch, m.loss, m.cross_entropy,
                     m.contrastive);
    });
    const fs::path out = o.out.empty() ? dir / "model.ckpt" : fs::path(o.out);
    save_checkpoint(result.checkpoint.model, result.checkpoint.meta, out);
    write_file(dir / "metrics.jsonl", metrics_jsonl(result.history, o.cfg));
    spdlog::info("best epoch {} (loss {:.5f}); checkpoint {}", result.checkpoint.meta.epoch,
                 result.checkpoint.meta.loss, out.string());
    return 0;
}

Checkpoint load_for_cli(const std::string& path) {
    require_file(path, "checkpoint");
    try {
        return load_checkpoint(path);
    } catch (const ParseError& e) {
        throw ConfigError(fmt::format("{} is not a readable checkpoint ({})", path, e.what()));
    }
}

LabeledDataset load_test_split(const std::string& path) {
    require_file(path, "dataset");
    auto test = load_dataset(path).subset(Split::Test);
    if (test.empty()) throw ConfigError(path + " has no test split");
    return test;
}

std::vector<DocLabel> predictions(const ScoredSet& s, double t) {
    std::vector<DocLabel> out;
    for (const auto& x : s) out.push_back(classify(x.score, t));
    return out;
}

ojson error_distance_json(const ModelScores& scores) {
    const auto ed = error_distance(scores.latent_vectors(), scores.latent_labels);
    ojson classes = ojson::object();
    for (const auto& [label, cd] : ed.classes) {
        const char name = scores.num_classes == 2 ? to_char(static_cast<DocLabel>(label))
                                                  : to_char(static_cast<SentenceLabel>(label));
        classes[std::string(1, name)] = {{"count", cd.count}, {"extra", cd.extra}, {"mean_ratio", cd.mean_ratio}};
    }
    return classes;
}

int cmd_eval(const CLI::App& app, const Common& c, EvalOpts& o) {
    const auto ckpt = load_for_cli(o.checkpoint);
    const auto test = load_test_split(o.data);
    const auto dir = make_run_dir(c, "eval", ckpt.meta.seed);
    record_config(app, dir);

    const auto scores = score_dataset(ckpt.model, test);
    const auto report = optimal_threshold(scores.scored);
    ojson roc = ojson::array();
    std::string roc_csv = "threshold,fpr,tpr\n";
    for (const auto& p : roc_curve(scores.scored)) {
        roc_csv += fmt::format("{},{},{}\n", p.threshold, p.fpr, p.tpr);
    }

    ojson js{{"level", ckpt.meta.level},
             {"lambda", ckpt.meta.lambda},
             {"seed", ckpt.meta.seed},
             {"documents", test.size()},
             {"metrics", to_json(report)},
             {"metrics_at_0.5", to_json(evaluate_at(scores.scored, 0.5))},
             {"error_distance", error_distance_json(scores)}};
    write_file(dir / "report.json", js.dump(2) + "\n");
    write_file(dir / "roc.csv", roc_csv);
    write_file(dir / "distribution.csv",
               distribution_csv(distribution_table(test, predictions(scores.scored, report.threshold))));
    write_file(dir / "latents.csv", latents_csv(scores.latents));
    std::cout << fmt::format("accuracy {:.4f} sensitivity {:.4f} specificity {:.4f} auc {:.4f} threshold {:.6g}\n",
                             report.accuracy, report.sensitivity, report.specificity, report.auc, report.threshold);
    return 0;
}

int cmd_compare(const CLI::App& app, const Common& c, CompareOpts& o) {
    const auto test = load_test_split(o.data);
    struct Run {
        ModelScores scores;
        EvalReport report;
    };
    auto run_all = [&](const std::vector<std::string>& paths, std::size_t classes) {
        std::vector<Run> runs;
        for (const auto& p : paths) {
            const auto ckpt = load_for_cli(p);
            if (ckpt.model.config().num_classes != classes) {
                throw ConfigError(fmt::format("{} is not a {}-class checkpoint", p, classes));
            }
            auto scores = score_dataset(ckpt.model, test);
            auto report = optimal_threshold(scores.scored);
            runs.push_back({std::move(scores), report});
        }
        return runs;
    };
    const auto dkd = run_all(o.dkd, 2);
    const auto skd = run_all(o.skd, 3);
    const auto dir = make_run_dir(c, "compare", 0);
    record_config(app, dir);

    ojson metrics = ojson::object();
    auto column = [](const std::vector<Run>& runs, double EvalReport::*field) {
        std::vector<double> v;
        for (const auto& r : runs) v.push_back(r.report.*field);
        return v;
    };
    const std::pair<const char*, double EvalReport::*> fields[] = {{"accuracy", &EvalReport::accuracy},
                                                                   {"sensitivity", &EvalReport::sensitivity},
                                                                   {"specificity", &EvalReport::specificity},
                                                                   {"auc", &EvalReport::auc}};
    for (const auto& [name, field] : fields) {
        const auto xs = column(skd, field), ys = column(dkd, field);
        const auto w = wilcoxon_rank_sum(xs, ys);
        metrics[name] = {{"skd", xs}, {"dkd", ys}, {"rank_sum_skd", w.rank_sum}, {"u_skd", w.u},
                         {"p_value", w.p_value}, {"exact", w.exact}};
        std::cout << fmt::format("{:<12} skd {} dkd {} p={:.4g}\n", name, fmt::join(xs, "/"), fmt::join(ys, "/"),
                                 w.p_value);
    }
    write_file(dir / "compare.json", ojson{{"documents", test.size()}, {"metrics", metrics}}.dump(2) + "\n");
    const auto rows = distribution_table(test, predictions(dkd.front().scores.scored, dkd.front().report.threshold),
                                         predictions(skd.front().scores.scored, skd.front().report.threshold));
    write_file(dir / "distribution.csv", distribution_csv(rows));
    return 0;
}

// SIGTERM/SIGINT are blocked in every thread and collected by a dedicated
// waiter, so shutdown never runs inside a signal handler.
int cmd_serve(const CLI::App& app, const Common& c, ServeOpts& o) {
    const auto colon = o.addr.rfind(':');
    if (colon == std::string::npos) throw ConfigError("--addr must be host:port");
    o.server.host = o.addr.substr(0, colon);
    try {
        o.server.port = std::stoi(o.addr.substr(colon + 1));
    } catch (const std::exception&) {
        throw ConfigError("invalid port in --addr");
    }
    auto ckpt = load_for_cli(o.checkpoint);

    double threshold = 0.5;
    if (o.threshold) {
        threshold = *o.threshold;
    } else if (!o.eval_report.empty()) {
        require_file(o.eval_report, "evaluation report");
        std::ifstream f(o.eval_report);
        threshold = nlohmann::json::parse(f).at("metrics").at("threshold").get<double>();
    }
    auto service = std::make_shared<AnalysisService>(threshold);
    service->set_model(std::make_shared<const StudentModel>(std::move(ckpt.model)));
    (void)app;
    (void)c;

    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGTERM);
    sigaddset(&set, SIGINT);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    std::thread waiter([set] {
        int sig = 0;
        sigwait(&set, &sig);
        spdlog::info("signal {} received, shutting down", sig);
        stop_serving();
    });
    spdlog::info("serving {} on {} (threshold {})", o.checkpoint, o.addr, threshold);
    try {
        serve(service, o.server);
    } catch (...) {
        pthread_kill(waiter.native_handle(), SIGTERM);
        waiter.join();
        throw;
    }
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
    return 0;
}

bool is_usage_error(const Error& e) {
    static const std::set<std::string> kinds{"ConfigError", "InvalidSpec", "UnsupportedCheckpoint"};
    return kinds.contains(e.kind());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sentence- and document-level distillation of report labels into small classifiers"};
    app.set_config("--config", "", "TOML configuration file; command-line flags take precedence");
    app.require_subcommand(1);

    Common common;
    app.add_option("--runs-dir", common.runs_dir, "Parent directory of per-run output directories")
        ->capture_default_str();
    app.add_option("--run-dir", common.run_dir, "Exact output directory (skips the timestamped name)");
    app.add_option("--log-level", common.log_level, "trace|debug|info|warn|error")->capture_default_str();

    SynthOpts synth;
    auto* s = app.add_subcommand("synth", "Generate a synthetic report corpus");
    s->add_option("--docs", synth.spec.n_docs, "Number of documents")->capture_default_str();
    s->add_option("--test-docs", synth.spec.test_docs, "Trailing documents tagged as test")->capture_default_str();
    s->add_option("--min-sentences", synth.spec.min_sentences)->capture_default_str();
    s->add_option("--max-sentences", synth.spec.max_sentences)->capture_default_str();
    s->add_option("--abnormal-frac", synth.spec.abnormal_fraction, "Abnormal sentence share in abnormal documents")
        ->capture_default_str();
    s->add_option("--abnormal-frac-range", synth.frac_range, "Per-document share drawn from [lo,hi]")
        ->expected(2);
    s->add_option("--abnormal-doc-rate", synth.spec.abnormal_doc_rate, "Probability a document is abnormal")
        ->capture_default_str();
    s->add_option("--uncertain-frac", synth.spec.uncertain_fraction)->capture_default_str();
    s->add_option("--seed", synth.spec.seed)->capture_default_str();
    s->add_option("--out", synth.out, "Output JSONL (default: <run dir>/dataset.jsonl)");

    LabelOpts label;
    auto* l = app.add_subcommand("label", "Label reports with the teacher ensemble");
    l->add_option("--in", label.in, "Input dataset JSONL")->required();
    l->add_option("--out", label.out, "Output JSONL (default: <run dir>/labeled.jsonl)");
    l->add_option("--level", label.level, "document|sentence")->capture_default_str();
    l->add_option("--teacher-url", label.teacher_url, "OpenAI-compatible endpoint; key from TEACHER_API_KEY");
    l->add_option("--teacher-model", label.teacher.model)->capture_default_str();
    l->add_option("--temperature", label.teacher.temperature)->capture_default_str();
    l->add_flag("--mock", label.mock, "Use the deterministic offline teacher");
    l->add_option("--mock-disagreement", label.mock_disagreement, "Per-extraction flip probability of the mock")
        ->capture_default_str();
    l->add_option("--seed", label.seed)->capture_default_str();
    l->add_option("--cache", label.cache, "Teacher cache JSONL (default: <run dir>/teacher_cache.jsonl)");
    l->add_option("--parallelism", label.parallelism, "In-flight teacher requests")->capture_default_str();

    TrainOpts tr;
    auto* t = app.add_subcommand("train", "Train a student model");
    t->add_option("--data", tr.data, "Labelled dataset JSONL")->required();
    t->add_option("--level", tr.level, "document|sentence")->capture_default_str();
    t->add_option("--lambda", tr.cfg.lambda, "Contrastive weight")->capture_default_str();
    t->add_option("--tau", tr.cfg.tau, "Contrastive temperature")->capture_default_str();
    t->add_option("--batch-size", tr.cfg.batch_size)->capture_default_str();
    t->add_option("--epochs", tr.cfg.epochs)->capture_default_str();
    t->add_option("--lr", tr.cfg.learning_rate)->capture_default_str();
    t->add_option("--clip-norm", tr.cfg.clip_norm, "Gradient norm ceiling, 0 disables")->capture_default_str();
    t->add_option("--seed", tr.cfg.seed)->capture_default_str();
    t->add_option("--encoder", tr.encoder, "attention|meanpool")->capture_default_str();
    t->add_option("--embed-dim", tr.cfg.embed_dim)->capture_default_str();
    t->add_option("--latent-dim", tr.cfg.latent_dim)->capture_default_str();
    t->add_option("--ff-dim", tr.cfg.ff_dim)->capture_default_str();
    t->add_option("--max-len", tr.cfg.max_len, "0 = level default")->capture_default_str();
    t->add_option("--out", tr.out, "Checkpoint path (default: <run dir>/model.ckpt)");

    EvalOpts ev;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
    e->add_option("--checkpoint", ev.checkpoint)->required();
    e->add_option("--data", ev.data, "Dataset JSONL with a test split")->required();

    CompareOpts cmp;
    auto* cm = app.add_subcommand("compare", "Compare document- and sentence-level checkpoints");
    cm->add_option("--dkd", cmp.dkd, "Document-level checkpoints")->required();
    cm->add_option("--skd", cmp.skd, "Sentence-level checkpoints")->required();
    cm->add_option("--data", cmp.data, "Dataset JSONL with a test split")->required();

    ServeOpts sv;
    auto* sr = app.add_subcommand("serve", "Serve /analyze and /healthz over HTTP");
    sr->add_option("--checkpoint", sv.checkpoint)->required();
    sr->add_option("--addr", sv.addr, "host:port")->capture_default_str();
    sr->add_option("--threshold", sv.threshold, "Document threshold (default: from --eval-report, else 0.5)");
    sr->add_option("--eval-report", sv.eval_report, "report.json written by eval");
    sr->add_option("--workers", sv.server.workers)->capture_default_str();
    sr->add_option("--cors-origin", sv.server.cors_origin)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kUsageError;
    }

    spdlog::set_default_logger(spdlog::stderr_color_mt("radkd"));
    spdlog::set_level(spdlog::level::from_str(common.log_level));

    try {
        if (*s) return cmd_synth(app, common, synth);
        if (*l) return cmd_label(app, common, label);
        if (*t) return cmd_train(app, common, tr);
        if (*e) return cmd_eval(app, common, ev);
        if (*cm) return cmd_compare(app, common, cmp);
        if (*sr) return cmd_serve(app, common, sv);
    } catch (const Error& err) {
        spdlog::error("{}", err.what());
        return is_usage_error(err) ? kUsageError : kRuntimeFailure;
    } catch (const std::exception& err) {
        spdlog::error("{}", err.what());
        return kRuntimeFailure;
    }
    return kUsageError;
}
