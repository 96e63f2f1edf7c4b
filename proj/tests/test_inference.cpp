#include <doctest.h>

#include <thread>

#include <nlohmann/json.hpp>

#include "radkd/corpus.hpp"
#include "radkd/error.hpp"
#include "radkd/inference.hpp"
#include "radkd/random.hpp"

// after Eigen, see service_http.cpp
#include <httplib.h>

using namespace radkd;
using json = nlohmann::json;

namespace {

std::shared_ptr<const StudentModel> tiny_model(std::size_t classes) {
    const std::vector<std::string> texts{"Heart size normal.", "Small left effusion.", "Possible nodule."};
    ModelConfig mc;
    mc.embed_dim = 8;
    mc.latent_dim = 8;
    mc.ff_dim = 16;
    mc.num_classes = classes;
    mc.seed = 2;
    return std::make_shared<const StudentModel>(mc, Vocabulary::build(texts));
}

SentencePrediction sp(double pa) {
    SentencePrediction s;
    s.p_abnormal = pa;
    return s;
}

}  // namespace

TEST_CASE("argmax tie order a > n > u") {
    CHECK(argmax_label(0.4, 0.4, 0.2) == SentenceLabel::Abnormal);
    CHECK(argmax_label(0.2, 0.4, 0.4) == SentenceLabel::Normal);
    CHECK(argmax_label(1.0 / 3, 1.0 / 3, 1.0 / 3) == SentenceLabel::Abnormal);
    CHECK(argmax_label(0.1, 0.2, 0.7) == SentenceLabel::Uncertain);
}

TEST_CASE("max aggregation") {
    const auto v = aggregate_max({sp(0.2), sp(0.7), sp(0.4)});
    CHECK(v.p_abnormal == 0.7);
    CHECK(v.p_normal == doctest::Approx(0.3));
    CHECK(aggregate_max({sp(0.35)}).p_abnormal == 0.35);
    CHECK_THROWS_AS(aggregate_max({}), EmptyReport);

    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        std::vector<SentencePrediction> s;
        const auto n = 1 + rng.below(6);
        for (std::size_t j = 0; j < n; ++j) s.push_back(sp(rng.uniform()));
        const double before = aggregate_max(s).p_abnormal;
        s.push_back(sp(rng.uniform()));
        CHECK(aggregate_max(s).p_abnormal >= before);
        rng.shuffle(s);
        CHECK(aggregate_max(s).p_abnormal >= before);
    }
}

TEST_CASE("classify uses >=") {
    CHECK(classify(0.7, 0.5) == DocLabel::Abnormal);
    CHECK(classify(0.7, 0.7) == DocLabel::Abnormal);
    CHECK(classify(0.3, 0.5) == DocLabel::Normal);
}

TEST_CASE("document and sentence prediction") {
    const auto m2 = tiny_model(2), m3 = tiny_model(3);
    const auto v = predict_document_dkd(*m2, "Heart size normal. Small left effusion.");
    CHECK(v.p_abnormal + v.p_normal == doctest::Approx(1.0));
    CHECK(v.p_abnormal == m2->forward("Heart size normal. Small left effusion.").probs(0));
    CHECK_THROWS_AS(predict_document_dkd(*m3, "x"), ConfigError);
    CHECK_THROWS_AS(predict_document_dkd(*m2, "  "), EmptyReport);

    const auto s = predict_document_skd(*m3, "Heart size normal. Small left effusion. Possible nodule.");
    REQUIRE(s.sentences.size() == 3);
    double mx = 0;
    for (const auto& x : s.sentences) mx = std::max(mx, x.p_abnormal);
    CHECK(s.p_abnormal == mx);
    CHECK_THROWS_AS(predict_document_skd(*m2, "x"), ConfigError);
    CHECK_THROWS_AS(predict_document_skd(*m3, ""), EmptyReport);

    // sentence order changes the listing only
    const auto r = predict_document_skd(*m3, "Possible nodule. Small left effusion. Heart size normal.");
    CHECK(r.p_abnormal == s.p_abnormal);
    CHECK(r.sentences[0].text == "Possible nodule.");
}

TEST_CASE("analysis service contract") {
    AnalysisService svc(0.5);
    CHECK(svc.health().status == 503);
    CHECK(svc.analyze(R"({"text":"Heart normal."})").status == 503);

    svc.set_model(tiny_model(3));
    CHECK(svc.health().status == 200);

    const auto ok = svc.analyze(R"({"text":"Heart size normal. Small left effusion."})");
    REQUIRE(ok.status == 200);
    const auto j = json::parse(ok.body);
    REQUIRE(j["sentences"].size() == 2);
    CHECK(j["sentences"][0]["index"] == 0);
    CHECK(j["sentences"][0]["text"] == "Heart size normal.");
    CHECK(j["sentences"][1]["text"] == "Small left effusion.");
    for (const auto& s : j["sentences"]) {
        const double total = s["probs"]["a"].get<double>() + s["probs"]["n"].get<double>() +
                             s["probs"]["u"].get<double>();
        CHECK(total == doctest::Approx(1.0));
        CHECK(std::string("anu").find(s["label"].get<std::string>()) != std::string::npos);
    }
    CHECK(j["threshold"] == 0.5);
    CHECK(svc.analyze(R"({"text":"Heart size normal. Small left effusion."})").body == ok.body);

    CHECK(svc.analyze("{not json").status == 400);
    CHECK(json::parse(svc.analyze("{not json").body).contains("error"));
    CHECK(svc.analyze(R"({"text":""})").status == 400);
    CHECK(svc.analyze(R"({"text":"   "})").status == 400);
    CHECK(svc.analyze(R"({"txt":"a"})").status == 400);
    CHECK(svc.analyze(R"([1,2])").status == 400);
    CHECK(svc.analyze(R"({"text":"a.","threshold":1.5})").status == 400);
    CHECK(svc.analyze(R"({"text":"a.","threshold":"high"})").status == 400);
}

TEST_CASE("analysis service: label follows the threshold") {
    AnalysisService svc;
    svc.set_model(tiny_model(3));
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
        const double t = rng.uniform();
        json req{{"text", "Small left effusion. Heart size normal. Possible nodule."}, {"threshold", t}};
        const auto j = json::parse(svc.analyze(req.dump()).body);
        CHECK((j["doc_label"] == "a") == (j["doc_prob_abnormal"].get<double>() >= t));
    }
}

TEST_CASE("analysis service with a document-level model") {
    AnalysisService svc;
    svc.set_model(tiny_model(2));
    const auto j = json::parse(svc.analyze(R"({"text":"Heart size normal. Small left effusion."})").body);
    CHECK(j["level"] == "document");
    CHECK(j["sentences"].size() == 2);
    CHECK(j["sentences"][0]["probs"]["u"] == 0.0);
}

TEST_CASE("HTTP service") {
    CHECK_THROWS_AS(AnalysisService(1.5), ConfigError);
    auto svc = std::make_shared<AnalysisService>(0.5);
    ServeOptions opts;
    opts.port = 0;
    opts.workers = 2;
    std::thread th([&] { serve(svc, opts); });
    while (bound_port() == 0) std::this_thread::sleep_for(std::chrono::milliseconds(5));

    httplib::Client cli("127.0.0.1", bound_port());
    auto h = cli.Get("/healthz");
    REQUIRE(h);
    CHECK(h->status == 503);  // no model yet
    svc->set_model(tiny_model(3));
    h = cli.Get("/healthz");
    CHECK(h->status == 200);
    CHECK(h->get_header_value("Access-Control-Allow-Origin") == "*");

    auto r = cli.Post("/analyze", R"({"text":"Heart size normal. Small left effusion."})", "application/json");
    REQUIRE(r);
    CHECK(r->status == 200);
    CHECK(json::parse(r->body)["sentences"].size() == 2);
    r = cli.Post("/analyze", "{oops", "application/json");
    CHECK(r->status == 400);
    auto pre = cli.Options("/analyze");
    REQUIRE(pre);
    CHECK(pre->status == 204);

    stop_serving();
    th.join();
    CHECK(bound_port() == 0);
}
