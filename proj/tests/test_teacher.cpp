#include <doctest.h>

#include <httplib.h>

#include <filesystem>
#include <functional>
#include <thread>

#include <nlohmann/json.hpp>

#include "radkd/corpus.hpp"
#include "radkd/error.hpp"
#include "radkd/teacher.hpp"

using namespace radkd;
using TL = TeacherLabel;

namespace {

// Endpoint that answers from a script, one entry per call.
class Scripted final : public ChatEndpoint {
public:
    using Step = std::function<std::string(const ChatRequest&)>;
    explicit Scripted(std::vector<Step> steps) : steps_(std::move(steps)) {}
    std::string complete(const ChatRequest& req) override {
        REQUIRE(calls < steps_.size());
        last = req;
        return steps_[calls++](req);
    }
    std::size_t calls = 0;
    ChatRequest last;

private:
    std::vector<Step> steps_;
};

Scripted::Step reply(std::string text) {
    return [text](const ChatRequest&) { return text; };
}
Scripted::Step transient() {
    return [](const ChatRequest&) -> std::string { throw TransientError("503"); };
}

TeacherOptions fast_retry() {
    TeacherOptions o;
    o.retry.base_delay = std::chrono::milliseconds(1);
    return o;
}

Report make_report(std::string text) {
    Report r;
    r.doc_id = "r";
    r.text = text;
    r.sentences = segment(text);
    return r;
}

}  // namespace

TEST_CASE("prompt templates") {
    const auto t = PromptTemplate::default_sentence();
    CHECK_NOTHROW(t.validate());
    CHECK(t.render("Lungs clear.").find("Lungs clear.") != std::string::npos);
    CHECK(t.hash() == PromptTemplate::default_sentence().hash());
    CHECK(t.hash() != PromptTemplate::default_document().hash());
    CHECK(t.hash().size() == 64);

    PromptTemplate bad = t;
    bad.user_template = "no placeholder";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.user_template = "{TEXT} and {TEXT}";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parse_reply") {
    const auto r = parse_reply("label: normal \xe2\x80\x94 reason: clear lungs", LabelSet::Ternary);
    CHECK(r.label == TL::Normal);
    CHECK(r.explanation == "clear lungs");

    CHECK(parse_reply("label: a\nreason: effusion", LabelSet::Binary).label == TL::Abnormal);
    CHECK(parse_reply("Label = U\nRationale: hedged", LabelSet::Ternary).label == TL::Uncertain);
    CHECK(parse_reply("**label:** abnormal\nexplanation: mass", LabelSet::Ternary).label == TL::Abnormal);

    CHECK_THROWS_AS(parse_reply("label: u\nreason: hedged", LabelSet::Binary), TeacherParseError);
    CHECK_THROWS_AS(parse_reply("I think it is fine", LabelSet::Ternary), TeacherParseError);
    CHECK_THROWS_AS(parse_reply("label: maybe\nreason: x", LabelSet::Ternary), TeacherParseError);
    CHECK_THROWS_AS(parse_reply("label: n", LabelSet::Ternary), TeacherParseError);
}

TEST_CASE("mock marker rules") {
    CHECK(mock_sentence_rule("Small left pleural effusion.").label == TL::Abnormal);
    CHECK(mock_sentence_rule("Cannot exclude early pneumonia.").label == TL::Uncertain);
    CHECK(mock_sentence_rule("No pneumothorax.").label == TL::Normal);
    CHECK(mock_sentence_rule("The heart is seen.").label == TL::Normal);
    CHECK(mock_document_rule("Heart size normal. Large right effusion.").label == TL::Abnormal);
    CHECK(mock_document_rule("Heart size normal. Lungs clear.").label == TL::Normal);
}

TEST_CASE("mock teacher through the client") {
    auto mock = std::make_shared<MockTeacher>(1, 0.0);
    TeacherClient client(mock, std::make_shared<LabelCache>());
    CHECK(client.query_document(make_report("Heart normal. Moderate consolidation at the base.")).label ==
          TL::Abnormal);
    CHECK(client.query_document(make_report("Heart normal. Lungs clear.")).label == TL::Normal);
    CHECK(client.query_sentence("Moderate effusion.").label == TL::Abnormal);
    CHECK(client.query_sentence("Cannot exclude a small nodule.").label == TL::Uncertain);
}

TEST_CASE("mock teacher: rate 0 agrees with itself, seeds are deterministic") {
    SynthSpec s;
    s.n_docs = 20;
    s.seed = 4;
    const auto ds = generate_synthetic(s);
    MockTeacher quiet(3, 0.0);
    MockTeacher a(3, 0.4), b(3, 0.4);
    for (const auto& d : ds.documents()) {
        for (const auto& sent : d.report.sentences) {
            ChatRequest req;
            req.subject = sent;
            std::string first;
            for (int e = 0; e < 3; ++e) {
                req.extraction = e;
                const auto r = quiet.complete(req);
                if (e == 0) first = r;
                CHECK(r == first);
                CHECK(a.complete(req) == b.complete(req));
            }
        }
    }
}

TEST_CASE("mock teacher: full flip rate") {
    // Two labels: every extraction flips to the same other label.
    MockTeacher binary(9, 1.0);
    ChatRequest req;
    req.labels = LabelSet::Binary;
    req.subject = "Heart normal. Lungs clear.";
    for (int e = 0; e < 3; ++e) {
        req.extraction = e;
        CHECK(parse_reply(binary.complete(req), LabelSet::Binary).label == TL::Abnormal);
    }

    // Three labels: each extraction picks one of two others, so all three
    // agree with probability 2 * (1/2)^3.
    MockTeacher ternary(9, 1.0);
    SynthSpec s;
    s.n_docs = 1800;
    s.seed = 12;
    std::size_t total = 0, unanimous = 0;
    const auto corpus = generate_synthetic(s);
    for (const auto& d : corpus.documents()) {
        for (std::size_t j = 0; j < d.report.sentences.size(); ++j) {
            ChatRequest r;
            r.subject = d.report.doc_id + "/" + std::to_string(j) + " " + d.report.sentences[j];
            std::array<TL, 3> labels{};
            for (int e = 0; e < 3; ++e) {
                r.extraction = e;
                labels[static_cast<std::size_t>(e)] = parse_reply(ternary.complete(r), LabelSet::Ternary).label;
            }
            ++total;
            unanimous += labels[0] == labels[1] && labels[1] == labels[2];
        }
    }
    REQUIRE(total >= 10000);
    CHECK(std::abs(static_cast<double>(unanimous) / static_cast<double>(total) - 0.25) <= 0.02);
}

TEST_CASE("client: repair re-ask") {
    auto ep = std::make_shared<Scripted>(
        std::vector{reply("it looks fine to me"), reply("label: n\nreason: nothing seen")});
    TeacherClient client(ep, std::make_shared<LabelCache>(), fast_retry());
    const auto r = client.query_sentence("Lungs clear.");
    CHECK(r.label == TL::Normal);
    CHECK(ep->calls == 2);
    CHECK(ep->last.messages.size() == 4);  // system, user, assistant, repair request
}

TEST_CASE("client: malformed twice raises TeacherParseError") {
    auto ep = std::make_shared<Scripted>(std::vector{reply("???"), reply("still no label")});
    TeacherClient client(ep, std::make_shared<LabelCache>(), fast_retry());
    CHECK_THROWS_AS(client.query_document(make_report("Lungs clear.")), TeacherParseError);
}

TEST_CASE("client: retries transient failures") {
    auto ep = std::make_shared<Scripted>(std::vector{transient(), transient(), reply("label: a\nreason: mass")});
    TeacherClient client(ep, std::make_shared<LabelCache>(), fast_retry());
    CHECK(client.query_sentence("Mass.").label == TL::Abnormal);
    CHECK(client.network_calls() == 3);

    auto down = std::make_shared<Scripted>(std::vector{transient(), transient(), transient()});
    TeacherClient failing(down, std::make_shared<LabelCache>(), fast_retry());
    CHECK_THROWS_AS(failing.query_sentence("Mass."), TeacherUnavailable);
    CHECK(down->calls == 3);
}

TEST_CASE("cache: warm cache makes no calls and persists to disk") {
    const auto path = std::filesystem::temp_directory_path() / "radkd_cache_test.jsonl";
    std::filesystem::remove(path);
    auto mock = std::make_shared<MockTeacher>(2, 0.3);
    std::vector<TeacherReply> first;
    {
        TeacherClient client(mock, std::make_shared<LabelCache>(path));
        for (int e = 0; e < 3; ++e) first.push_back(client.query_sentence("Small effusion.", e));
        CHECK(client.network_calls() == 3);
    }
    auto cache = std::make_shared<LabelCache>(path);
    CHECK(cache->size() == 3);
    TeacherClient again(mock, cache);
    for (int e = 0; e < 3; ++e) CHECK(again.query_sentence("Small effusion.", e) == first[static_cast<std::size_t>(e)]);
    CHECK(again.network_calls() == 0);

    // one JSON object per line with the documented fields
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"key", "extraction", "label", "explanation", "raw"}) CHECK(j.contains(k));
    std::filesystem::remove(path);
}

TEST_CASE("cache keys depend on template and text") {
    const auto s = PromptTemplate::default_sentence(), d = PromptTemplate::default_document();
    CHECK(LabelCache::key(s, "x") == LabelCache::key(s, "x"));
    CHECK(LabelCache::key(s, "x") != LabelCache::key(s, "y"));
    CHECK(LabelCache::key(s, "x") != LabelCache::key(d, "x"));
}

TEST_CASE("embedding and cosine") {
    TermFrequencyEmbedder e;
    CHECK(cosine(e.embed("left effusion"), e.embed("Effusion, left")) == doctest::Approx(1.0));
    CHECK(cosine(e.embed("left effusion"), e.embed("clear lungs")) == 0.0);
    CHECK_THROWS_AS(e.embed("..."), ConfidenceUnavailable);
    CHECK_THROWS_AS(cosine({}, e.embed("x")), ConfidenceUnavailable);
}

TEST_CASE("ensemble decision examples") {
    CHECK(ensemble_decision({TL::Normal, TL::Normal, TL::Normal}, {0, 0, 0}) == TL::Normal);
    CHECK(ensemble_decision({TL::Abnormal, TL::Abnormal, TL::Normal}, {0.8, 0.8, 0.5}) == TL::Abnormal);
    CHECK_FALSE(ensemble_decision({TL::Abnormal, TL::Normal, TL::Uncertain}, {1, 1, 1}).has_value());
    CHECK_FALSE(ensemble_decision({TL::Abnormal, TL::Abnormal, TL::Normal}, {0.5, 0.5, 0.5}).has_value());
    CHECK_FALSE(ensemble_decision({TL::Normal, TL::Abnormal, TL::Abnormal}, {0.9, 0.2, 0.4}).has_value());
}

TEST_CASE("ensemble decision table over all 27 triples") {
    // Confidence sets chosen so the majority wins, loses and ties.
    const std::array<std::array<double, 3>, 3> conf_sets{{{0.9, 0.7, 0.2}, {0.1, 0.2, 0.8}, {0.5, 0.5, 0.5}}};
    for (const auto& conf : conf_sets) {
        for (int code = 0; code < 27; ++code) {
            const std::array<TL, 3> l{static_cast<TL>(code % 3), static_cast<TL>(code / 3 % 3),
                                      static_cast<TL>(code / 9)};
            std::optional<TL> expected;
            if (l[0] == l[1] && l[1] == l[2]) {
                expected = l[0];
            } else if (l[0] != l[1] && l[1] != l[2] && l[0] != l[2]) {
                expected.reset();
            } else {
                const TL major = l[0] == l[1] || l[0] == l[2] ? l[0] : l[1];
                double sum = 0, minority = 0;
                for (int i = 0; i < 3; ++i) {
                    if (l[static_cast<std::size_t>(i)] == major) sum += conf[static_cast<std::size_t>(i)];
                    else minority = conf[static_cast<std::size_t>(i)];
                }
                if (sum / 2 > minority) expected = major;
            }
            CHECK(ensemble_decision(l, conf) == expected);
            CHECK(is_two_one_split(l) == (!(l[0] == l[1] && l[1] == l[2]) &&
                                          !(l[0] != l[1] && l[1] != l[2] && l[0] != l[2])));
        }
    }
}

TEST_CASE("ensemble_label with scripted replies") {
    TermFrequencyEmbedder emb;
    auto ep = std::make_shared<Scripted>(std::vector{reply("label: a\nreason: large effusion on the left"),
                                                     reply("label: a\nreason: left effusion"),
                                                     reply("label: n\nreason: nothing")});
    TeacherClient client(ep, std::make_shared<LabelCache>(), fast_retry());
    const auto v = ensemble_label("Large effusion on the left.", client, emb);
    CHECK(v.accepted);
    CHECK(v.label == TL::Abnormal);
    REQUIRE(v.confidences.has_value());
    CHECK((*v.confidences)[2] == 0.0);

    auto bad = std::make_shared<Scripted>(std::vector{reply("?"), reply("?")});
    TeacherClient broken(bad, std::make_shared<LabelCache>(), fast_retry());
    const auto r = ensemble_label("Mass.", broken, emb);
    CHECK_FALSE(r.accepted);
    CHECK_FALSE(r.reason.empty());
}

TEST_CASE("filter_documents bookkeeping") {
    auto accepted = [](TL l) {
        EnsembleVerdict v;
        v.accepted = true;
        v.label = l;
        return v;
    };
    EnsembleVerdict rejected;
    std::vector<DocumentVerdicts> docs(3);
    const char* texts[] = {"Heart normal. Mass seen.", "Lungs clear. Possible nodule.", "No effusion. Stable."};
    for (std::size_t i = 0; i < 3; ++i) {
        docs[i].report = make_report(texts[i]);
        docs[i].report.doc_id = "d" + std::to_string(i);
    }
    docs[0].verdicts = {accepted(TL::Normal), accepted(TL::Abnormal)};
    docs[1].verdicts = {accepted(TL::Normal), rejected};
    docs[2].verdicts = {accepted(TL::Normal), accepted(TL::Normal)};
    const auto res = filter_documents(docs);
    CHECK(res.stats.documents_total == 3);
    CHECK(res.stats.documents_kept == 2);
    CHECK(res.stats.sentences_total == 6);
    CHECK(res.stats.sentences_kept == 4);
    CHECK(res.dataset.size() == 2);
    CHECK(res.dataset[0].doc_label == DocLabel::Abnormal);
    CHECK(res.dataset[1].doc_label == DocLabel::Normal);
    CHECK(res.dataset.counts().sentences == res.stats.sentences_kept);

    docs[2].verdicts.pop_back();
    CHECK_THROWS_AS(filter_documents(docs), ConfigError);
}

TEST_CASE("label_reports: parallel result equals sequential, order preserved") {
    SynthSpec s;
    s.n_docs = 40;
    s.seed = 31;
    const auto ds = generate_synthetic(s);
    TermFrequencyEmbedder emb;
    auto run = [&](std::size_t parallelism) {
        TeacherClient client(std::make_shared<MockTeacher>(6, 0.3), std::make_shared<LabelCache>());
        return label_reports(ds.documents(), client, emb, {parallelism});
    };
    const auto seq = run(1), par = run(4);
    REQUIRE(seq.size() == ds.size());
    const auto a = filter_documents(seq), b = filter_documents(par);
    CHECK(to_jsonl(a.dataset) == to_jsonl(b.dataset));
    for (std::size_t i = 0; i < seq.size(); ++i) {
        CHECK(seq[i].report == ds[i].report);
        for (std::size_t j = 0; j < seq[i].verdicts.size(); ++j) {
            CHECK(seq[i].verdicts[j].label == par[i].verdicts[j].label);
        }
    }

    // rate 0: everything is retained
    TeacherClient clean(std::make_shared<MockTeacher>(6, 0.0), std::make_shared<LabelCache>());
    const auto all = filter_documents(label_reports(ds.documents(), clean, emb));
    CHECK(all.stats.documents_kept == ds.size());
}

TEST_CASE("HTTP endpoint against a local stub") {
    httplib::Server srv;
    int status = 200;
    std::string seen_auth, seen_body;
    srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        seen_body = req.body;
        res.status = status;
        res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"label: n\nreason: clear"}}]})",
                        "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    std::thread th([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    HttpChatEndpoint ep("http://127.0.0.1:" + std::to_string(port), "sekrit", std::chrono::seconds(5));
    ChatRequest req;
    req.model = "m";
    req.temperature = 0.7;
    req.messages = {{"system", "s"}, {"user", "u"}};
    CHECK(ep.complete(req) == "label: n\nreason: clear");
    CHECK(seen_auth == "Bearer sekrit");
    const auto body = nlohmann::json::parse(seen_body);
    CHECK(body.at("model") == "m");
    CHECK(body.at("messages").size() == 2);
    CHECK(body.at("temperature").get<double>() == doctest::Approx(0.7));

    status = 503;
    CHECK_THROWS_AS(ep.complete(req), TransientError);
    status = 401;
    CHECK_THROWS_AS(ep.complete(req), TeacherUnavailable);

    srv.stop();
    th.join();

    HttpChatEndpoint dead("http://127.0.0.1:" + std::to_string(port), "", std::chrono::seconds(1));
    CHECK_THROWS_AS(dead.complete(req), TransientError);
    CHECK_THROWS_AS(HttpChatEndpoint("no-scheme", ""), ConfigError);
}

TEST_CASE("completion response parsing") {
    CHECK(HttpChatEndpoint::response_content(R"({"choices":[{"message":{"content":"hi"}}]})") == "hi");
    CHECK_THROWS_AS(HttpChatEndpoint::response_content("{}"), TeacherParseError);
    CHECK_THROWS_AS(HttpChatEndpoint::response_content("not json"), TeacherParseError);
}
