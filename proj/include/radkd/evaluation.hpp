#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "radkd/corpus.hpp"
#include "radkd/model.hpp"

namespace radkd {

/// One scored document: the abnormal probability and the reference label.
/// Abnormal is the positive class throughout.
struct Scored {
    double score;
    DocLabel truth;
};
using ScoredSet = std::vector<Scored>;

struct RocPoint {
    double threshold;
    double fpr;
    double tpr;
};

/// ROC points from the strictest threshold (nothing predicted positive) to
/// the most lenient (everything positive). Tied scores move together.
std::vector<RocPoint> roc_curve(const ScoredSet& scored);

/// Trapezoidal area under roc_curve. Throws UndefinedAUC unless both classes
/// are present.
double roc_auc(const ScoredSet& scored);

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct EvalReport {
    double auc = 0.0;
    double threshold = 0.5;
    double accuracy = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    Confusion confusion;
    std::size_t n_pos = 0, n_neg = 0;
};

/// Metrics when predicting abnormal iff score >= threshold.
EvalReport evaluate_at(const ScoredSet& scored, double threshold);

/// Threshold maximising Youden's J over the observed scores plus 0 and 1;
/// ties go to the lowest threshold.
EvalReport optimal_threshold(const ScoredSet& scored);

nlohmann::ordered_json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

enum class Alternative : std::uint8_t { TwoSided, Less, Greater };

struct WilcoxonResult {
    double rank_sum = 0.0;  // sum of midranks of xs in the pooled sample
    double u = 0.0;         // Mann-Whitney U of xs
    double p_value = 1.0;
    bool exact = false;
};

/// Wilcoxon rank-sum test. `Greater` tests whether xs tend to exceed ys.
/// Exact (enumerated null distribution with midranks) when the pooled size is
/// at most 20, normal approximation with tie and continuity correction
/// otherwise.
WilcoxonResult wilcoxon_rank_sum(std::span<const double> xs, std::span<const double> ys,
                                 Alternative alt = Alternative::TwoSided);

inline constexpr std::size_t kExactWilcoxonLimit = 20;

struct ClassDistance {
    Eigen::VectorXd centroid;
    double extra = 0.0;       // mean distance from this centroid to the others
    double mean_ratio = 0.0;  // mean of intra / extra over the class
    std::size_t count = 0;
};

struct ErrorDistanceReport {
    std::map<std::size_t, ClassDistance> classes;
    std::vector<double> ratios;  // per sample, input order
};

/// Per-sample ratio of the distance to the own-class centroid over the mean
/// distance between that centroid and the other centroids. Throws
/// DegenerateGeometry when that mean distance is zero or fewer than two
/// classes are present.
ErrorDistanceReport error_distance(std::span<const Eigen::VectorXd> latents,
                                   std::span<const std::size_t> labels);

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;  // population
};

struct DistributionRow {
    std::string cohort;
    DocLabel gt = DocLabel::Normal;
    std::size_t count = 0;
    // Null for empty cohorts.
    std::optional<MeanStd> abnormal, normal, uncertain;
};

/// Per-document a/n/u sentence percentages in {a,n,u}; sums to 100.
std::array<double, 3> sentence_percentages(std::span<const SentenceLabel> labels);

/// Sentence-label composition of four cohorts (all test documents, D-KD
/// errors, S-KD errors, D-KD errors fixed by S-KD), split by reference class.
std::vector<DistributionRow> distribution_table(const LabeledDataset& test,
                                                std::span<const DocLabel> dkd_pred,
                                                std::span<const DocLabel> skd_pred);

/// Single-model variant: cohorts "all" and "incorrect".
std::vector<DistributionRow> distribution_table(const LabeledDataset& test,
                                                std::span<const DocLabel> pred);

std::string distribution_csv(std::span<const DistributionRow> rows);

struct Projection {
    Eigen::MatrixXd components;  // 2 x dim, rows are unit principal axes
    Eigen::Vector2d variance;
    Eigen::MatrixXd coords;      // n x 2
};

/// Top two principal components by power iteration with deflation. Each
/// axis is sign-fixed so its largest-magnitude coordinate is positive.
/// Throws DegenerateProjection with fewer than two samples.
Projection pca2(const Eigen::MatrixXd& samples);

struct LatentRow {
    std::string id;
    std::string cls;
    Eigen::VectorXd latent;
};

/// CSV with header id,class,z0..z{h-1},pc1,pc2.
std::string latents_csv(std::span<const LatentRow> rows);

/// A model run over a labelled dataset. Document-level models contribute one
/// latent per document, sentence-level models one per sentence (labelled by
/// the dataset's sentence labels when present, else by the prediction).
struct ModelScores {
    std::size_t num_classes = 0;
    ScoredSet scored;  // one per document, dataset order
    std::vector<LatentRow> latents;
    std::vector<std::size_t> latent_labels;

    std::vector<Eigen::VectorXd> latent_vectors() const {
        std::vector<Eigen::VectorXd> v;
        for (const auto& r : latents) v.push_back(r.latent);
        return v;
    }
};

ModelScores score_dataset(const StudentModel& model, const LabeledDataset& ds);

/// Kahan-compensated mean.
double compensated_mean(std::span<const double> xs);

}  // namespace radkd
