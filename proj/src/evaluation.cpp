#include "radkd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "radkd/error.hpp"
#include "radkd/inference.hpp"

namespace radkd {

namespace {

std::pair<std::size_t, std::size_t> class_counts(const ScoredSet& scored) {
    std::size_t pos = 0;
    for (const auto& s : scored) pos += s.truth == DocLabel::Abnormal;
    return {pos, scored.size() - pos};
}

double ratio_or_nan(std::size_t num, std::size_t den) {
    return den == 0 ? std::numeric_limits<double>::quiet_NaN()
                    : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

std::vector<RocPoint> roc_curve(const ScoredSet& scored) {
    const auto [P, N] = class_counts(scored);
    ScoredSet sorted = scored;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Scored& a, const Scored& b) { return a.score > b.score; });
    std::vector<RocPoint> pts;
    pts.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < sorted.size();) {
        const double t = sorted[i].score;
        for (; i < sorted.size() && sorted[i].score == t; ++i) {
            (sorted[i].truth == DocLabel::Abnormal ? tp : fp) += 1;
        }
        pts.push_back({t, ratio_or_nan(fp, N), ratio_or_nan(tp, P)});
    }
    return pts;
}

double roc_auc(const ScoredSet& scored) {
    const auto [P, N] = class_counts(scored);
    if (P == 0 || N == 0) throw UndefinedAUC("AUC needs both classes present");
    ScoredSet sorted = scored;
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const Scored& a, const Scored& b) { return a.score > b.score; });
    // Trapezoids on integer counts, scaled once at the end.
    double twice_area = 0.0;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < sorted.size();) {
        const double t = sorted[i].score;
        const std::size_t tp0 = tp, fp0 = fp;
        for (; i < sorted.size() && sorted[i].score == t; ++i) {
            (sorted[i].truth == DocLabel::Abnormal ? tp : fp) += 1;
        }
        twice_area += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0);
    }
    return twice_area / (2.0 * static_cast<double>(P) * static_cast<double>(N));
}

EvalReport evaluate_at(const ScoredSet& scored, double threshold) {
    EvalReport r;
    r.threshold = threshold;
    for (const auto& s : scored) {
        const bool pred = s.score >= threshold;
        if (s.truth == DocLabel::Abnormal) (pred ? r.confusion.tp : r.confusion.fn) += 1;
        else (pred ? r.confusion.fp : r.confusion.tn) += 1;
    }
    const auto& c = r.confusion;
    r.n_pos = c.tp + c.fn;
    r.n_neg = c.tn + c.fp;
    r.accuracy = ratio_or_nan(c.tp + c.tn, scored.size());
    r.sensitivity = ratio_or_nan(c.tp, r.n_pos);
    r.specificity = ratio_or_nan(c.tn, r.n_neg);
    const auto [P, N] = class_counts(scored);
    r.auc = (P && N) ? roc_auc(scored) : std::numeric_limits<double>::quiet_NaN();
    return r;
}

EvalReport optimal_threshold(const ScoredSet& scored) {
    const auto [P, N] = class_counts(scored);
    if (P == 0 || N == 0) throw UndefinedAUC("threshold selection needs both classes present");

    std::vector<double> cands{0.0, 1.0};
    for (const auto& s : scored) cands.push_back(s.score);
    std::sort(cands.begin(), cands.end());
    cands.erase(std::unique(cands.begin(), cands.end()), cands.end());

    // Sweep ascending; scores >= t are positive. J is compared exactly as
    // tp*N + tn*P to avoid rounding ties.
    std::vector<Scored> asc = scored;
    std::sort(asc.begin(), asc.end(), [](const Scored& a, const Scored& b) { return a.score < b.score; });
    std::size_t below_pos = 0, below_neg = 0, k = 0;
    double best_t = cands.front();
    long double best_j = -1.0L;
    for (double t : cands) {
        for (; k < asc.size() && asc[k].score < t; ++k) {
            (asc[k].truth == DocLabel::Abnormal ? below_pos : below_neg) += 1;
        }
        const std::size_t tp = P - below_pos, tn = below_neg;
        const long double j = static_cast<long double>(tp) * N + static_cast<long double>(tn) * P;
        if (j > best_j) {
            best_j = j;
            best_t = t;
        }
    }
    return evaluate_at(scored, best_t);
}

nlohmann::ordered_json to_json(const EvalReport& r) {
    return {
        {"auc", r.auc},
        {"threshold", r.threshold},
        {"accuracy", r.accuracy},
        {"sensitivity", r.sensitivity},
        {"specificity", r.specificity},
        {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}}},
        {"n_pos", r.n_pos},
        {"n_neg", r.n_neg},
    };
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
    auto num = [&](const char* k) {
        return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
    };
    EvalReport r;
    r.auc = num("auc");
    r.threshold = j.at("threshold").get<double>();
    r.accuracy = num("accuracy");
    r.sensitivity = num("sensitivity");
    r.specificity = num("specificity");
    const auto& c = j.at("confusion");
    r.confusion = {c.at("tp").get<std::size_t>(), c.at("fp").get<std::size_t>(), c.at("tn").get<std::size_t>(),
                   c.at("fn").get<std::size_t>()};
    r.n_pos = j.at("n_pos").get<std::size_t>();
    r.n_neg = j.at("n_neg").get<std::size_t>();
    return r;
}

// ---------------------------------------------------------------------------
// Wilcoxon rank-sum

namespace {

// Doubled midranks (integers) of the pooled sample, xs first.
std::vector<std::size_t> doubled_ranks(std::span<const double> pooled, std::vector<std::size_t>* tie_sizes) {
    const std::size_t n = pooled.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pooled[a] < pooled[b]; });
    std::vector<std::size_t> r2(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) ++j;
        // positions i+1 .. j+1, midrank (i+1 + j+1)/2
        for (std::size_t k = i; k <= j; ++k) r2[order[k]] = i + j + 2;
        if (tie_sizes) tie_sizes->push_back(j - i + 1);
        i = j + 1;
    }
    return r2;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

}  // namespace

WilcoxonResult wilcoxon_rank_sum(std::span<const double> xs, std::span<const double> ys, Alternative alt) {
    if (xs.empty() || ys.empty()) throw EmptyDataset("rank-sum test needs two non-empty samples");
    for (double v : xs) if (!std::isfinite(v)) throw InvalidSpec("non-finite sample value");
    for (double v : ys) if (!std::isfinite(v)) throw InvalidSpec("non-finite sample value");

    const std::size_t n = xs.size(), m = ys.size(), total = n + m;
    std::vector<double> pooled(xs.begin(), xs.end());
    pooled.insert(pooled.end(), ys.begin(), ys.end());
    std::vector<std::size_t> ties;
    const auto r2 = doubled_ranks(pooled, &ties);

    std::size_t w2 = 0;
    for (std::size_t i = 0; i < n; ++i) w2 += r2[i];

    WilcoxonResult res;
    res.rank_sum = static_cast<double>(w2) / 2.0;
    res.u = res.rank_sum - static_cast<double>(n * (n + 1)) / 2.0;

    double p_low = 1.0, p_high = 1.0;
    if (total <= kExactWilcoxonLimit) {
        res.exact = true;
        // dp[k][s]: number of k-subsets whose doubled ranks sum to s.
        const std::size_t smax = std::accumulate(r2.begin(), r2.end(), std::size_t{0});
        std::vector<std::vector<double>> dp(n + 1, std::vector<double>(smax + 1, 0.0));
        dp[0][0] = 1.0;
        for (std::size_t item = 0; item < total; ++item) {
            for (std::size_t k = std::min(n, item + 1); k >= 1; --k) {
                for (std::size_t s = smax; s >= r2[item]; --s) dp[k][s] += dp[k - 1][s - r2[item]];
            }
        }
        double all = 0.0, low = 0.0, high = 0.0;
        for (std::size_t s = 0; s <= smax; ++s) {
            all += dp[n][s];
            if (s <= w2) low += dp[n][s];
            if (s >= w2) high += dp[n][s];
        }
        p_low = low / all;
        p_high = high / all;
    } else {
        const double dn = static_cast<double>(n), dm = static_cast<double>(m), dN = static_cast<double>(total);
        double tie_term = 0.0;
        for (std::size_t t : ties) {
            const double dt = static_cast<double>(t);
            tie_term += dt * dt * dt - dt;
        }
        const double var = dn * dm / 12.0 * ((dN + 1.0) - tie_term / (dN * (dN - 1.0)));
        if (var > 0.0) {
            const double sd = std::sqrt(var), mean = dn * dm / 2.0;
            p_low = normal_cdf((res.u - mean + 0.5) / sd);
            p_high = 1.0 - normal_cdf((res.u - mean - 0.5) / sd);
        }
    }
    switch (alt) {
        case Alternative::Less: res.p_value = p_low; break;
        case Alternative::Greater: res.p_value = p_high; break;
        case Alternative::TwoSided: res.p_value = 2.0 * std::min(p_low, p_high); break;
    }
    res.p_value = std::clamp(res.p_value, 0.0, 1.0);
    return res;
}

// ---------------------------------------------------------------------------
// Error distance

ErrorDistanceReport error_distance(std::span<const Eigen::VectorXd> latents, std::span<const std::size_t> labels) {
    if (latents.size() != labels.size()) throw InvalidSpec("latents and labels differ in length");
    if (latents.empty()) throw EmptyDataset("no latents");
    const auto dim = latents.front().size();
    ErrorDistanceReport rep;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        if (latents[i].size() != dim) throw InvalidSpec("latents differ in dimension");
        auto& c = rep.classes[labels[i]];
        if (c.count == 0) c.centroid = Eigen::VectorXd::Zero(dim);
        c.centroid += latents[i];
        ++c.count;
    }
    if (rep.classes.size() < 2) throw DegenerateGeometry("need at least two classes");
    for (auto& [_, c] : rep.classes) c.centroid /= static_cast<double>(c.count);
    for (auto& [label, c] : rep.classes) {
        double sum = 0.0;
        for (const auto& [other, o] : rep.classes) {
            if (other != label) sum += (c.centroid - o.centroid).norm();
        }
        c.extra = sum / static_cast<double>(rep.classes.size() - 1);
        if (!(c.extra > 0.0)) {
            throw DegenerateGeometry(fmt::format("class {} has zero distance to the other centroids", label));
        }
    }
    rep.ratios.resize(latents.size());
    for (std::size_t i = 0; i < latents.size(); ++i) {
        auto& c = rep.classes[labels[i]];
        rep.ratios[i] = (latents[i] - c.centroid).norm() / c.extra;
        c.mean_ratio += rep.ratios[i];
    }
    for (auto& [_, c] : rep.classes) c.mean_ratio /= static_cast<double>(c.count);
    return rep;
}

// ---------------------------------------------------------------------------
// Distribution table

double compensated_mean(std::span<const double> xs) {
    if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
    double sum = 0.0, comp = 0.0;
    for (double x : xs) {
        const double y = x - comp;
        const double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    return sum / static_cast<double>(xs.size());
}

std::array<double, 3> sentence_percentages(std::span<const SentenceLabel> labels) {
    if (labels.empty()) throw EmptyDocument("no sentence labels");
    std::array<std::size_t, 3> counts{};
    for (auto l : labels) ++counts[static_cast<std::size_t>(l)];
    std::array<double, 3> out{};
    for (std::size_t k = 0; k < 3; ++k) {
        out[k] = 100.0 * static_cast<double>(counts[k]) / static_cast<double>(labels.size());
    }
    return out;
}

namespace {

MeanStd mean_std(const std::vector<double>& xs) {
    MeanStd ms;
    ms.mean = compensated_mean(xs);
    std::vector<double> sq;
    sq.reserve(xs.size());
    for (double x : xs) sq.push_back((x - ms.mean) * (x - ms.mean));
    ms.stddev = std::sqrt(compensated_mean(sq));
    return ms;
}

}  // namespace

std::vector<DistributionRow> distribution_table(const LabeledDataset& test, std::span<const DocLabel> dkd_pred,
                                                std::span<const DocLabel> skd_pred) {
    const auto& docs = test.documents();
    if (dkd_pred.size() != docs.size() || skd_pred.size() != docs.size()) {
        throw InvalidSpec("prediction count does not match the test set");
    }
    std::vector<std::array<double, 3>> pct;
    for (const auto& d : docs) {
        if (d.sentence_labels.empty()) {
            throw InvalidDataset(d.report.doc_id + ": distribution table needs sentence labels");
        }
        pct.push_back(sentence_percentages(d.sentence_labels));
    }

    struct Cohort {
        const char* name;
        bool (*member)(bool dkd_ok, bool skd_ok);
    };
    static constexpr Cohort cohorts[] = {
        {"all", [](bool, bool) { return true; }},
        {"dkd_incorrect", [](bool d, bool) { return !d; }},
        {"skd_incorrect", [](bool, bool s) { return !s; }},
        {"dkd_incorrect_skd_correct", [](bool d, bool s) { return !d && s; }},
    };

    std::vector<DistributionRow> rows;
    for (const auto& cohort : cohorts) {
        for (DocLabel gt : {DocLabel::Abnormal, DocLabel::Normal}) {
            DistributionRow row;
            row.cohort = cohort.name;
            row.gt = gt;
            std::array<std::vector<double>, 3> cols;
            for (std::size_t i = 0; i < docs.size(); ++i) {
                if (docs[i].doc_label != gt) continue;
                if (!cohort.member(dkd_pred[i] == gt, skd_pred[i] == gt)) continue;
                ++row.count;
                for (std::size_t k = 0; k < 3; ++k) cols[k].push_back(pct[i][k]);
            }
            if (row.count > 0) {
                row.abnormal = mean_std(cols[0]);
                row.normal = mean_std(cols[1]);
                row.uncertain = mean_std(cols[2]);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

std::vector<DistributionRow> distribution_table(const LabeledDataset& test, std::span<const DocLabel> pred) {
    auto rows = distribution_table(test, pred, pred);
    std::vector<DistributionRow> out;
    for (auto& r : rows) {
        if (r.cohort == "all") out.push_back(std::move(r));
        else if (r.cohort == "dkd_incorrect") {
            r.cohort = "incorrect";
            out.push_back(std::move(r));
        }
    }
    return out;
}

std::string distribution_csv(std::span<const DistributionRow> rows) {
    std::string out = "cohort,gt,count,a_mean,a_std,n_mean,n_std,u_mean,u_std\n";
    auto cell = [](const std::optional<MeanStd>& ms) {
        return ms ? fmt::format("{:.4f},{:.4f}", ms->mean, ms->stddev) : std::string(",");
    };
    for (const auto& r : rows) {
        out += fmt::format("{},{},{},{},{},{}\n", r.cohort, to_char(r.gt), r.count, cell(r.abnormal), cell(r.normal),
                           cell(r.uncertain));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Projection

namespace {

Eigen::VectorXd power_iteration(const Eigen::MatrixXd& c, double* eigenvalue) {
    const auto dim = c.rows();
    Eigen::VectorXd v(dim);
    // Fixed, non-symmetric start so the result is reproducible.
    for (Eigen::Index i = 0; i < dim; ++i) v(i) = 1.0 + static_cast<double>(i) / static_cast<double>(dim);
    v.normalize();
    for (int it = 0; it < 20000; ++it) {
        Eigen::VectorXd w = c * v;
        const double norm = w.norm();
        if (norm < 1e-300) break;  // null space; any unit vector will do
        w /= norm;
        if (w.dot(v) < 0) w = -w;
        const double delta = (w - v).norm();
        v = std::move(w);
        if (delta < 1e-13) break;
    }
    *eigenvalue = v.dot(c * v);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    return v;
}

}  // namespace

Projection pca2(const Eigen::MatrixXd& samples) {
    if (samples.rows() < 2) throw DegenerateProjection("projection needs at least two samples");
    if (samples.cols() < 2) throw DegenerateProjection("projection needs at least two dimensions");
    const Eigen::RowVectorXd mean = samples.colwise().mean();
    const Eigen::MatrixXd centered = samples.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(samples.rows());

    Projection p;
    p.components.resize(2, samples.cols());
    for (int k = 0; k < 2; ++k) {
        double lambda = 0.0;
        const Eigen::VectorXd v = power_iteration(cov, &lambda);
        p.components.row(k) = v.transpose();
        p.variance(k) = lambda;
        cov -= lambda * v * v.transpose();
    }
    p.coords = centered * p.components.transpose();
    return p;
}

std::string latents_csv(std::span<const LatentRow> rows) {
    if (rows.empty()) throw EmptyDataset("no latents to export");
    const auto dim = rows.front().latent.size();
    Eigen::MatrixXd z(static_cast<Eigen::Index>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].latent.size() != dim) throw InvalidSpec("latents differ in dimension");
        z.row(static_cast<Eigen::Index>(i)) = rows[i].latent.transpose();
    }
    const auto proj = pca2(z);

    std::string out = "id,class";
    for (Eigen::Index k = 0; k < dim; ++k) out += fmt::format(",z{}", k);
    out += ",pc1,pc2\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out += rows[i].id;
        out += ',';
        out += rows[i].cls;
        for (Eigen::Index k = 0; k < dim; ++k) out += fmt::format(",{}", rows[i].latent(k));
        const auto r = static_cast<Eigen::Index>(i);
        out += fmt::format(",{},{}\n", proj.coords(r, 0), proj.coords(r, 1));
    }
    return out;
}

// ---------------------------------------------------------------------------

ModelScores score_dataset(const StudentModel& model, const LabeledDataset& ds) {
    if (ds.empty()) throw EmptyDataset("nothing to score");
    ModelScores out;
    out.num_classes = model.config().num_classes;
    for (const auto& d : ds.documents()) {
        if (out.num_classes == 2) {
            auto v = predict_document_dkd(model, d.report.text);
            out.scored.push_back({v.p_abnormal, d.doc_label});
            out.latents.push_back({d.report.doc_id, std::string(1, to_char(d.doc_label)), std::move(v.latent)});
            out.latent_labels.push_back(static_cast<std::size_t>(d.doc_label));
            continue;
        }
        auto v = predict_document_skd(model, d.report);
        out.scored.push_back({v.p_abnormal, d.doc_label});
        for (auto& s : v.sentences) {
            const SentenceLabel l = d.has_sentence_labels() ? d.sentence_labels[s.index] : s.label;
            out.latents.push_back({fmt::format("{}#{}", d.report.doc_id, s.index), std::string(1, to_char(l)),
                                   std::move(s.latent)});
            out.latent_labels.push_back(static_cast<std::size_t>(l));
        }
    }
    return out;
}

}  // namespace radkd
