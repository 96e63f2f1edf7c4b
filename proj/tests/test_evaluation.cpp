#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "radkd/error.hpp"
#include "radkd/evaluation.hpp"
#include "radkd/random.hpp"
#include "radkd/text.hpp"

using namespace radkd;
using SL = SentenceLabel;

namespace {

constexpr auto A = DocLabel::Abnormal;
constexpr auto N = DocLabel::Normal;

ScoredSet make(const std::vector<double>& pos, const std::vector<double>& neg) {
    ScoredSet s;
    for (double p : pos) s.push_back({p, A});
    for (double n : neg) s.push_back({n, N});
    return s;
}

LabeledDocument doc(const std::string& id, std::vector<SL> labels) {
    LabeledDocument d;
    d.report.doc_id = id;
    for (std::size_t i = 0; i < labels.size(); ++i) d.report.sentences.push_back("s" + std::to_string(i) + ".");
    d.report.text = join(d.report.sentences, " ");
    d.sentence_labels = labels;
    d.high_confidence.assign(labels.size(), true);
    d.doc_label = derive_doc_label(labels);
    d.split = Split::Test;
    return d;
}

}  // namespace

TEST_CASE("AUC examples") {
    CHECK(roc_auc(make({0.9, 0.8}, {0.1, 0.2})) == 1.0);
    CHECK(roc_auc(make({0.9, 0.3}, {0.5, 0.1})) == 0.75);
    CHECK(roc_auc(make({0.5, 0.5}, {0.5, 0.5})) == 0.5);
    CHECK(roc_auc(make({0.1}, {0.9})) == 0.0);
    CHECK_THROWS_AS(roc_auc(make({0.4, 0.5}, {})), UndefinedAUC);
    CHECK_THROWS_AS(roc_auc(make({}, {0.1})), UndefinedAUC);

    const auto roc = roc_curve(make({0.9, 0.3}, {0.5, 0.1}));
    CHECK(std::isinf(roc.front().threshold));
    CHECK(roc.front().fpr == 0.0);
    CHECK(roc.back().tpr == 1.0);
    CHECK(roc.back().fpr == 1.0);
}

TEST_CASE("AUC matches the pairwise definition") {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> pos, neg;
        const auto np = 1 + rng.below(100), nn = 1 + rng.below(100);
        // coarse grid so ties are common
        for (std::size_t i = 0; i < np; ++i) pos.push_back(static_cast<double>(rng.below(20)) / 19.0);
        for (std::size_t i = 0; i < nn; ++i) neg.push_back(static_cast<double>(rng.below(15)) / 19.0);
        CHECK(std::abs(roc_auc(make(pos, neg)) - oracle::pairwise_auc(pos, neg)) <= 1e-12);
    }
}

TEST_CASE("optimal threshold") {
    const auto sep = optimal_threshold(make({0.9, 0.8}, {0.1, 0.2}));
    CHECK(sep.threshold == 0.8);
    CHECK(sep.sensitivity == 1.0);
    CHECK(sep.specificity == 1.0);
    CHECK(sep.accuracy == 1.0);
    CHECK(sep.auc == 1.0);

    // J ties between 0.4 and 0.6; lowest wins
    const auto tie = optimal_threshold(make({0.6, 0.4}, {0.5, 0.1}));
    CHECK(tie.threshold == 0.4);

    const auto flat = optimal_threshold(make({0.5, 0.5}, {0.5, 0.5}));
    CHECK(flat.sensitivity + flat.specificity - 1.0 == doctest::Approx(0.0));

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        ScoredSet s;
        for (int i = 0; i < 40; ++i) s.push_back({rng.uniform(), rng.bernoulli(0.4) ? A : N});
        s.push_back({0.3, A});
        s.push_back({0.7, N});
        const auto r = optimal_threshold(s);
        const auto& c = r.confusion;
        CHECK(c.tp + c.fn == r.n_pos);
        CHECK(c.tn + c.fp == r.n_neg);
        CHECK(r.accuracy == doctest::Approx(double(c.tp + c.tn) / double(s.size())));
        CHECK(r.sensitivity == doctest::Approx(double(c.tp) / double(r.n_pos)));
        CHECK(r.specificity == doctest::Approx(double(c.tn) / double(r.n_neg)));
        // no observed threshold beats it
        const double best = r.sensitivity + r.specificity;
        for (const auto& x : s) {
            const auto e = evaluate_at(s, x.score);
            CHECK(e.sensitivity + e.specificity <= best + 1e-12);
        }
    }
}

TEST_CASE("evaluate_at") {
    const auto s = make({0.9, 0.4}, {0.5, 0.1});
    const auto r = evaluate_at(s, 0.5);
    CHECK(r.confusion.tp == 1);
    CHECK(r.confusion.fp == 1);
    CHECK(r.confusion.tn == 1);
    CHECK(r.confusion.fn == 1);
    CHECK(std::isnan(evaluate_at(make({0.2}, {}), 0.5).specificity));

    const auto back = eval_report_from_json(to_json(r));
    CHECK(back.accuracy == r.accuracy);
    CHECK(back.confusion.tp == r.confusion.tp);
    CHECK(back.threshold == r.threshold);
}

TEST_CASE("Wilcoxon examples") {
    const std::vector<double> lo{1, 2, 3}, hi{4, 5, 6};
    const auto r = wilcoxon_rank_sum(lo, hi);
    CHECK(r.exact);
    CHECK(r.rank_sum == 6.0);
    CHECK(r.u == 0.0);
    CHECK(r.p_value == doctest::Approx(0.1));
    CHECK(wilcoxon_rank_sum(lo, hi, Alternative::Less).p_value == doctest::Approx(0.05));
    CHECK(wilcoxon_rank_sum(lo, hi, Alternative::Greater).p_value == doctest::Approx(1.0));

    const std::vector<double> same{2, 2, 2};
    CHECK(wilcoxon_rank_sum(same, same).p_value == doctest::Approx(1.0));

    const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{7, 8, 9, 10, 11, 12};
    CHECK(wilcoxon_rank_sum(a, b).p_value == doctest::Approx(2.0 / 924.0).epsilon(1e-12));
}

TEST_CASE("Wilcoxon exact p-values match enumeration") {
    Rng rng(77);
    for (int trial = 0; trial < 60; ++trial) {
        const auto n = 1 + rng.below(6), m = 1 + rng.below(6);
        std::vector<double> xs, ys;
        for (std::size_t i = 0; i < n; ++i) xs.push_back(static_cast<double>(rng.below(6)));
        for (std::size_t i = 0; i < m; ++i) ys.push_back(static_cast<double>(rng.below(6)));
        const auto e = oracle::enumerate_rank_sum(xs, ys);
        CHECK(wilcoxon_rank_sum(xs, ys, Alternative::Less).p_value == doctest::Approx(e.less).epsilon(1e-9));
        CHECK(wilcoxon_rank_sum(xs, ys, Alternative::Greater).p_value == doctest::Approx(e.greater).epsilon(1e-9));
        CHECK(wilcoxon_rank_sum(xs, ys).p_value == doctest::Approx(e.two_sided).epsilon(1e-9));
    }
}

TEST_CASE("Wilcoxon normal approximation") {
    std::vector<double> xs, ys;
    for (int i = 0; i < 15; ++i) {
        xs.push_back(i);
        ys.push_back(i + 0.5);
    }
    const auto r = wilcoxon_rank_sum(xs, ys);
    CHECK_FALSE(r.exact);
    CHECK(r.p_value > 0.5);

    std::vector<double> far;
    for (int i = 0; i < 15; ++i) far.push_back(100 + i);
    const auto s = wilcoxon_rank_sum(xs, far, Alternative::Less);
    CHECK(s.p_value < 1e-5);
    CHECK(wilcoxon_rank_sum(xs, far, Alternative::Greater).p_value > 0.99);
    for (double p : {r.p_value, s.p_value}) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
}

TEST_CASE("error distance") {
    using V = Eigen::VectorXd;
    const std::vector<V> pts{V::Constant(2, 1.0), V::Constant(2, 1.0), V::Constant(2, 3.0)};
    const std::vector<std::size_t> lab{0, 0, 1};
    const auto r = error_distance(pts, lab);
    for (double x : r.ratios) CHECK(x == 0.0);

    const std::vector<V> line{V{{0.0, 0.0}}, V{{2.0, 0.0}}, V{{5.0, 0.0}}};
    const auto q = error_distance(line, lab);
    CHECK(q.classes.at(0).extra == doctest::Approx(4.0));
    CHECK(q.classes.at(0).mean_ratio == doctest::Approx(0.25));
    CHECK(q.classes.at(1).mean_ratio == 0.0);
    CHECK(q.classes.at(0).count == 2);

    // invariant under rotation, translation and uniform scale
    Rng rng(12);
    std::vector<V> cloud;
    std::vector<std::size_t> cls;
    for (int i = 0; i < 30; ++i) {
        V v(3);
        for (int k = 0; k < 3; ++k) v(k) = rng.normal() + (i % 3) * 2.0;
        cloud.push_back(v);
        cls.push_back(static_cast<std::size_t>(i % 3));
    }
    Eigen::MatrixXd M(3, 3);
    for (int i = 0; i < 9; ++i) M(i / 3, i % 3) = rng.normal();
    const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(M).householderQ();
    std::vector<V> moved;
    for (const auto& v : cloud) moved.push_back(2.5 * Q * v + V::Constant(3, 7.0));
    const auto base = error_distance(cloud, cls), other = error_distance(moved, cls);
    for (std::size_t i = 0; i < cloud.size(); ++i) CHECK(other.ratios[i] == doctest::Approx(base.ratios[i]));

    const std::vector<std::size_t> one{0, 0, 0};
    CHECK_THROWS_AS(error_distance(line, one), DegenerateGeometry);
    const std::vector<V> same(3, V::Constant(2, 1.0));
    CHECK_THROWS_AS(error_distance(same, std::vector<std::size_t>{0, 1, 1}), DegenerateGeometry);
}

TEST_CASE("sentence percentages and distribution tables") {
    const std::vector<SL> labels{SL::Abnormal, SL::Abnormal, SL::Normal, SL::Uncertain};
    const auto p = sentence_percentages(labels);
    CHECK(p[0] == 50.0);
    CHECK(p[1] == 25.0);
    CHECK(p[2] == 25.0);

    const LabeledDataset ds({doc("d0", {SL::Abnormal, SL::Normal}), doc("d1", {SL::Normal, SL::Normal}),
                             doc("d2", {SL::Abnormal, SL::Uncertain, SL::Normal}),
                             doc("d3", {SL::Uncertain, SL::Normal}), doc("d4", {SL::Abnormal})});
    const std::vector<DocLabel> dkd{N, N, N, A, A};
    const std::vector<DocLabel> skd{A, N, N, N, A};
    const auto rows = distribution_table(ds, dkd, skd);
    auto find = [&](const std::string& c, DocLabel gt) {
        for (const auto& r : rows)
            if (r.cohort == c && r.gt == gt) return r;
        FAIL("missing row " << c);
        return DistributionRow{};
    };
    // partition: every document lands in exactly one gt bucket of "all"
    CHECK(find("all", A).count + find("all", N).count == ds.size());
    CHECK(find("all", A).count == 3);
    CHECK(find("dkd_incorrect", A).count == 2);
    CHECK(find("dkd_incorrect", N).count == 1);
    CHECK(find("skd_incorrect", A).count == 1);
    CHECK(find("dkd_incorrect_skd_correct", A).count == 1);
    CHECK(find("dkd_incorrect_skd_correct", N).count == 1);
    for (auto gt : {A, N})
        CHECK(find("dkd_incorrect_skd_correct", gt).count <= find("dkd_incorrect", gt).count);

    const auto all_n = find("all", N);
    REQUIRE(all_n.normal);
    CHECK(all_n.normal->mean == doctest::Approx(75.0));
    CHECK(all_n.normal->stddev == doctest::Approx(25.0));
    CHECK_FALSE(find("skd_incorrect", N).abnormal.has_value());

    const auto csv = distribution_csv(rows);
    CHECK(csv.starts_with("cohort,gt,count,a_mean,a_std,n_mean,n_std,u_mean,u_std\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(rows.size() + 1));

    const auto single = distribution_table(ds, dkd);
    CHECK(single.size() == 4);
}

TEST_CASE("pca2") {
    Eigen::MatrixXd line(20, 3);
    for (int i = 0; i < 20; ++i) line.row(i) = Eigen::RowVector3d(1, 2, -1) * (i - 7.0);
    const auto p = pca2(line);
    CHECK(p.variance(1) < 1e-9 * p.variance(0));
    CHECK(std::abs(p.components.row(0).norm() - 1.0) < 1e-9);

    Rng rng(4);
    Eigen::MatrixXd x(30, 4);
    for (int i = 0; i < 30; ++i)
        for (int k = 0; k < 4; ++k) x(i, k) = rng.normal() * (k + 1);
    const auto a = pca2(x);
    CHECK(std::abs(a.components.row(0).dot(a.components.row(1))) < 1e-6);
    CHECK(a.variance(0) >= a.variance(1));

    // row order is irrelevant
    Eigen::MatrixXd rev = x.colwise().reverse();
    const auto b = pca2(rev);
    CHECK((a.components - b.components).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(a.coords(0, 0) - b.coords(29, 0)) < 1e-6);

    CHECK_THROWS_AS(pca2(Eigen::MatrixXd(1, 3)), DegenerateProjection);

    std::vector<LatentRow> rows;
    for (int i = 0; i < 5; ++i) rows.push_back({"d" + std::to_string(i), "a", x.row(i).transpose()});
    const auto csv = latents_csv(rows);
    CHECK(csv.starts_with("id,class,z0,z1,z2,z3,pc1,pc2\n"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
}

TEST_CASE("compensated mean") {
    std::vector<double> xs(1000, 0.1);
    xs.push_back(1e8);
    xs.push_back(-1e8);
    CHECK(compensated_mean(xs) == doctest::Approx(100.0 / 1002.0));
    CHECK(compensated_mean(std::vector<double>{1, 2, 3}) == 2.0);
}
