#include "radkd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "radkd/error.hpp"
#include "radkd/random.hpp"

namespace radkd {

std::string_view to_string(Level l) { return l == Level::Document ? "document" : "sentence"; }

std::optional<Level> parse_level(std::string_view s) {
    if (s == "document") return Level::Document;
    if (s == "sentence") return Level::Sentence;
    return std::nullopt;
}

void TrainConfig::validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be positive");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
}

double cross_entropy(std::span<const double> p, std::size_t y) {
    if (y >= p.size()) throw InvalidDistribution("label index outside the distribution");
    double sum = 0.0;
    for (double v : p) {
        if (!(v >= -1e-6) || !std::isfinite(v)) throw InvalidDistribution("negative probability");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw InvalidDistribution("probabilities sum to " + std::to_string(sum));
    }
    return -std::log(std::max(p[y], 1e-12));
}

namespace {

std::vector<Eigen::VectorXd> normalized(std::span<const Eigen::VectorXd> latents,
                                        std::vector<double>& norms) {
    std::vector<Eigen::VectorXd> out;
    norms.clear();
    for (const auto& z : latents) {
        const double n = z.norm();
        if (!(n > 0.0)) throw DegenerateLatent("zero-norm latent in batch");
        norms.push_back(n);
        out.push_back(z / n);
    }
    return out;
}

double log_sum_exp(const std::vector<double>& xs) {
    const double mx = *std::max_element(xs.begin(), xs.end());
    double s = 0.0;
    for (double x : xs) s += std::exp(x - mx);
    return mx + std::log(s);
}

}  // namespace

double supcon_loss(std::span<const Eigen::VectorXd> latents, std::span<const std::size_t> labels,
                   std::size_t anchor, double tau) {
    if (latents.size() != labels.size() || anchor >= latents.size()) {
        throw ConfigError("supcon_loss: batch shape mismatch");
    }
    std::vector<double> norms;
    const auto zn = normalized(latents, norms);
    std::vector<double> pos, all;
    for (std::size_t k = 0; k < zn.size(); ++k) {
        if (k == anchor) continue;
        const double s = zn[anchor].dot(zn[k]) / tau;
        all.push_back(s);
        if (labels[k] == labels[anchor]) pos.push_back(s);
    }
    if (pos.empty()) return 0.0;
    return -(log_sum_exp(pos) - std::log(static_cast<double>(pos.size())) - log_sum_exp(all));
}

SupConBatch supcon_batch(std::span<const Eigen::VectorXd> latents,
                         std::span<const std::size_t> labels, double tau) {
    if (latents.size() != labels.size()) throw ConfigError("supcon_batch: shape mismatch");
    const std::size_t b = latents.size();
    SupConBatch out;
    out.grads.assign(b, Eigen::VectorXd::Zero(b ? latents[0].size() : 0));
    if (b < 2) return out;

    std::vector<double> norms;
    const auto zn = normalized(latents, norms);
    Eigen::MatrixXd sim(b, b);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < b; ++k) sim(i, k) = zn[i].dot(zn[k]) / tau;

    std::vector<Eigen::VectorXd> g_unit(b, Eigen::VectorXd::Zero(zn[0].size()));
    // coefficient of d(L_i)/d(s_ik), filled per contributing anchor
    std::vector<std::pair<std::size_t, Eigen::VectorXd>> coeffs;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<double> pos, all;
        for (std::size_t k = 0; k < b; ++k) {
            if (k == i) continue;
            all.push_back(sim(i, k));
            if (labels[k] == labels[i]) pos.push_back(sim(i, k));
        }
        if (pos.empty()) continue;
        const double lse_pos = log_sum_exp(pos);
        const double lse_all = log_sum_exp(all);
        out.loss += -(lse_pos - std::log(static_cast<double>(pos.size())) - lse_all);
        ++out.contributing;

        Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(b));
        for (std::size_t k = 0; k < b; ++k) {
            if (k == i) continue;
            double ck = std::exp(sim(i, k) - lse_all);
            if (labels[k] == labels[i]) ck -= std::exp(sim(i, k) - lse_pos);
            c(static_cast<Eigen::Index>(k)) = ck;
        }
        coeffs.emplace_back(i, std::move(c));
    }
    if (out.contributing == 0) return out;

    const double m = static_cast<double>(out.contributing);
    out.loss /= m;
    for (const auto& [i, c] : coeffs) {
        for (std::size_t k = 0; k < b; ++k) {
            const double w = c(static_cast<Eigen::Index>(k)) / (m * tau);
            if (w == 0.0) continue;
            g_unit[i] += w * zn[k];
            g_unit[k] += w * zn[i];
        }
    }
    // Back through the l2 normalisation: (I - u u^T) g / |z|.
    for (std::size_t i = 0; i < b; ++i) {
        out.grads[i] = (g_unit[i] - zn[i] * zn[i].dot(g_unit[i])) / norms[i];
    }
    return out;
}

LossResult total_loss(const StudentModel& model, std::span<const Example> batch, double lambda,
                      double tau) {
    if (batch.empty()) throw EmptyDataset("empty batch");
    const std::size_t b = batch.size();
    const double inv_b = 1.0 / static_cast<double>(b);

    std::vector<ForwardTrace> traces(b);
    std::vector<Eigen::VectorXd> latents(b);
    std::vector<std::size_t> labels(b);
    LossResult out;
    for (std::size_t i = 0; i < b; ++i) {
        model.forward_trace(batch[i].tokens, traces[i]);
        latents[i] = traces[i].latent;
        labels[i] = batch[i].label;
        const auto& p = traces[i].probs;
        out.cross_entropy += cross_entropy(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())),
                                           labels[i]);
    }
    out.cross_entropy *= inv_b;

    SupConBatch sc;
    if (lambda > 0.0) {
        sc = supcon_batch(latents, labels, tau);
        out.contrastive = sc.loss;
    } else {
        // Still report the term so ablation logs stay comparable.
        if (b >= 2) out.contrastive = supcon_batch(latents, labels, tau).loss;
    }
    out.total = out.cross_entropy + lambda * out.contrastive;

    out.grad.assign(model.param_count(), 0.0);
    const Eigen::VectorXd no_latent_grad = Eigen::VectorXd::Zero(traces[0].latent.size());
    for (std::size_t i = 0; i < b; ++i) {
        Eigen::VectorXd g_logits = traces[i].probs;
        g_logits(static_cast<Eigen::Index>(labels[i])) -= 1.0;
        g_logits *= inv_b;
        if (lambda > 0.0) {
            model.backward(traces[i], lambda * sc.grads[i], g_logits, out.grad);
        } else {
            model.backward(traces[i], no_latent_grad, g_logits, out.grad);
        }
    }
    return out;
}

TrainResult train_examples(StudentModel model, std::span<const Example> examples,
                           const TrainConfig& cfg, const EpochCallback& on_epoch) {
    cfg.validate();
    if (examples.empty()) throw EmptyDataset("no training examples");

    Rng rng(cfg.seed ^ 0x7a11ULL);
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    std::vector<EpochMetrics> history;
    std::vector<double> best_params(model.params().begin(), model.params().end());
    EpochMetrics best{0, INFINITY, 0.0, 0.0};
    std::vector<Example> batch;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double sum_total = 0.0, sum_ce = 0.0, sum_con = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            batch.clear();
            for (std::size_t i = start; i < end; ++i) batch.push_back(examples[order[i]]);
            const LossResult r = total_loss(model, batch, cfg.lambda, cfg.tau);
            double scale = cfg.learning_rate;
            if (cfg.clip_norm > 0.0) {
                double sq = 0.0;
                for (double g : r.grad) sq += g * g;
                const double norm = std::sqrt(sq);
                if (norm > cfg.clip_norm) scale *= cfg.clip_norm / norm;
            }
            auto params = model.params();
            for (std::size_t p = 0; p < params.size(); ++p) {
                params[p] -= scale * r.grad[p];
            }
            model.snap_to_storage_precision();
            sum_total += r.total;
            sum_ce += r.cross_entropy;
            sum_con += r.contrastive;
            ++n_batches;
        }
        const double nb = static_cast<double>(n_batches);
        const EpochMetrics m{epoch, sum_total / nb, sum_ce / nb, sum_con / nb};
        if (!std::isfinite(m.loss)) throw Error("TrainingDiverged", "non-finite loss at epoch " + std::to_string(epoch));
        history.push_back(m);
        spdlog::debug("epoch {} loss {:.6f} ce {:.6f} con {:.6f}", epoch, m.loss, m.cross_entropy,
                      m.contrastive);
        if (on_epoch) on_epoch(m);
        if (m.loss < best.loss) {
            best = m;
            std::copy(model.params().begin(), model.params().end(), best_params.begin());
        }
    }

    std::copy(best_params.begin(), best_params.end(), model.params().begin());
    TrainingMeta meta{std::string(to_string(cfg.level)), cfg.lambda, cfg.tau, cfg.seed, best.epoch,
                      best.loss};
    return {Checkpoint{std::move(model), std::move(meta)}, std::move(history)};
}

namespace {

ModelConfig model_config(const TrainConfig& cfg) {
    ModelConfig m;
    m.encoder = cfg.encoder;
    m.embed_dim = cfg.embed_dim;
    m.latent_dim = cfg.latent_dim;
    m.ff_dim = cfg.ff_dim;
    m.num_classes = cfg.num_classes();
    m.max_len = cfg.effective_max_len();
    m.seed = cfg.seed;
    return m;
}

}  // namespace

TrainResult train_dkd(const LabeledDataset& ds, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
    if (cfg.level != Level::Document) throw ConfigError("train_dkd requires level=document");
    const LabeledDataset train_split = ds.subset(Split::Train);
    if (train_split.empty()) throw EmptyDataset("no training documents");

    std::vector<std::string> texts;
    for (const auto& d : train_split.documents()) texts.push_back(d.report.text);
    StudentModel model(model_config(cfg), Vocabulary::build(texts));

    std::vector<Example> examples;
    for (const auto& d : train_split.documents()) {
        examples.push_back({model.tokenize(d.report.text), static_cast<std::size_t>(d.doc_label)});
    }
    return train_examples(std::move(model), examples, cfg, on_epoch);
}

TrainResult train_skd(const LabeledDataset& ds, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
    if (cfg.level != Level::Sentence) throw ConfigError("train_skd requires level=sentence");
    const LabeledDataset train_split = ds.subset(Split::Train);
    if (train_split.empty()) throw EmptyDataset("no training documents");
    if (!train_split.has_sentence_labels()) {
        throw ConfigError("sentence-level training needs sentence labels for every document");
    }

    std::vector<std::string> texts;
    for (const auto& d : train_split.documents())
        texts.insert(texts.end(), d.report.sentences.begin(), d.report.sentences.end());
    StudentModel model(model_config(cfg), Vocabulary::build(texts));

    std::vector<Example> examples;
    for (const auto& d : train_split.documents()) {
        for (std::size_t j = 0; j < d.report.sentences.size(); ++j) {
            examples.push_back({model.tokenize(d.report.sentences[j]),
                                static_cast<std::size_t>(d.sentence_labels[j])});
        }
    }
    return train_examples(std::move(model), examples, cfg, on_epoch);
}

TrainResult train(const LabeledDataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch) {
    return cfg.level == Level::Document ? train_dkd(ds, cfg, on_epoch) : train_skd(ds, cfg, on_epoch);
}

std::string metrics_jsonl(const std::vector<EpochMetrics>& history, const TrainConfig& cfg) {
    std::string out;
    for (const auto& m : history) {
        nlohmann::ordered_json j{{"epoch", m.epoch},
                                 {"loss", m.loss},
                                 {"cross_entropy", m.cross_entropy},
                                 {"contrastive", m.contrastive},
                                 {"lambda", cfg.lambda},
                                 {"tau", cfg.tau},
                                 {"seed", cfg.seed}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace radkd
