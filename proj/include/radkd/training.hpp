#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "radkd/corpus.hpp"
#include "radkd/model.hpp"

namespace radkd {

enum class Level : std::uint8_t { Document, Sentence };

std::string_view to_string(Level l);
std::optional<Level> parse_level(std::string_view s);

struct TrainConfig {
    Level level = Level::Sentence;
    double lambda = 1.0;
    double tau = 0.1;
    std::size_t batch_size = 32;
    std::size_t epochs = 15;
    double learning_rate = 0.05;
    /// Global gradient-norm ceiling per step; 0 disables clipping.
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
    EncoderKind encoder = EncoderKind::Attention;
    std::size_t embed_dim = 64;
    std::size_t latent_dim = 64;
    std::size_t ff_dim = 128;
    /// 0 picks the level default (64 tokens per sentence, 256 per document).
    std::size_t max_len = 0;

    std::size_t num_classes() const { return level == Level::Document ? 2 : 3; }
    std::size_t effective_max_len() const {
        return max_len ? max_len : (level == Level::Document ? 256 : 64);
    }
    /// Throws ConfigError.
    void validate() const;
};

/// -log p[y], with the log argument clamped at 1e-12. Throws
/// InvalidDistribution when `p` is off the simplex by more than 1e-6.
double cross_entropy(std::span<const double> p, std::size_t y);

/// Supervised contrastive loss of one anchor over a batch of latents, using
/// cosine similarity at temperature `tau`:
///
///   -log mean_{v in P} [ exp(s(i,v)) / sum_{k != i} exp(s(i,k)) ]
///
/// where P are the other batch members sharing the anchor's label. The
/// anchor is excluded from both the positives and the denominator. Returns 0
/// when the anchor has no positive. Throws DegenerateLatent on a zero latent.
double supcon_loss(std::span<const Eigen::VectorXd> latents, std::span<const std::size_t> labels,
                   std::size_t anchor, double tau);

struct SupConBatch {
    double loss = 0.0;                  // mean over anchors that have positives
    std::size_t contributing = 0;       // number of such anchors
    std::vector<Eigen::VectorXd> grads; // d(loss)/d(latent_i)
};

SupConBatch supcon_batch(std::span<const Eigen::VectorXd> latents,
                         std::span<const std::size_t> labels, double tau);

struct Example {
    TokenSeq tokens;
    std::size_t label;
};

struct LossResult {
    double total = 0.0;
    double cross_entropy = 0.0;  // batch mean
    double contrastive = 0.0;    // mean over contributing anchors
    std::vector<double> grad;    // same layout as the model parameters
};

/// mean CE + lambda * mean contrastive, with gradients for every parameter.
LossResult total_loss(const StudentModel& model, std::span<const Example> batch, double lambda,
                      double tau);

struct EpochMetrics {
    std::size_t epoch;
    double loss, cross_entropy, contrastive;
};

struct TrainResult {
    Checkpoint checkpoint;  // parameters of the best-loss epoch
    std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Mini-batch gradient descent over prepared examples. The model is trained
/// in place; the returned checkpoint holds the best epoch.
TrainResult train_examples(StudentModel model, std::span<const Example> examples,
                           const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Document-level distillation over (report, doc label) pairs of the train split.
TrainResult train_dkd(const LabeledDataset& ds, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});
/// Sentence-level distillation over (sentence, sentence label) pairs.
TrainResult train_skd(const LabeledDataset& ds, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

/// Dispatches on `cfg.level`.
TrainResult train(const LabeledDataset& ds, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

std::string metrics_jsonl(const std::vector<EpochMetrics>& history, const TrainConfig& cfg);

}  // namespace radkd
