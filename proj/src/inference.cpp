#include "radkd/inference.hpp"

#include <algorithm>

#include <nlohmann/json.hpp>

#include "radkd/error.hpp"
#include "radkd/text.hpp"

namespace radkd {

SentenceLabel argmax_label(double pa, double pn, double pu) {
    if (pa >= pn && pa >= pu) return SentenceLabel::Abnormal;
    if (pn >= pu) return SentenceLabel::Normal;
    return SentenceLabel::Uncertain;
}

DocumentVerdict aggregate_max(std::vector<SentencePrediction> sentences) {
    if (sentences.empty()) throw EmptyReport("no sentences to aggregate");
    DocumentVerdict v;
    v.p_abnormal = 0.0;
    for (const auto& s : sentences) v.p_abnormal = std::max(v.p_abnormal, s.p_abnormal);
    v.p_normal = 1.0 - v.p_abnormal;
    v.sentences = std::move(sentences);
    return v;
}

DocumentVerdict predict_document_dkd(const StudentModel& model, std::string_view report) {
    if (model.config().num_classes != 2) {
        throw ConfigError("document-level inference needs a two-class model");
    }
    const std::string text = normalize_whitespace(report);
    if (text.empty()) throw EmptyReport("report text is empty");
    auto out = model.forward(text);
    DocumentVerdict v;
    v.p_abnormal = out.probs(0);
    v.p_normal = 1.0 - v.p_abnormal;
    v.latent = std::move(out.latent);
    return v;
}

namespace {

SentencePrediction predict_sentence(const StudentModel& model, std::size_t index, std::string text) {
    auto out = model.forward(text);
    SentencePrediction s;
    s.index = index;
    s.text = std::move(text);
    s.p_abnormal = out.probs(0);
    s.p_normal = out.probs(1);
    s.p_uncertain = out.probs.size() > 2 ? out.probs(2) : 0.0;
    s.label = argmax_label(s.p_abnormal, s.p_normal, s.p_uncertain);
    s.latent = std::move(out.latent);
    return s;
}

}  // namespace

DocumentVerdict predict_document_skd(const StudentModel& model, const Report& report) {
    if (model.config().num_classes != 3) {
        throw ConfigError("sentence-level inference needs a three-class model");
    }
    if (report.sentences.empty()) throw EmptyReport(report.doc_id + ": no sentences");
    std::vector<SentencePrediction> preds;
    for (std::size_t j = 0; j < report.sentences.size(); ++j) {
        preds.push_back(predict_sentence(model, j, report.sentences[j]));
    }
    return aggregate_max(std::move(preds));
}

DocumentVerdict predict_document_skd(const StudentModel& model, std::string_view report) {
    Report r;
    r.text = std::string(report);
    r.sentences = segment(report);
    return predict_document_skd(model, r);
}

DocLabel classify(double p_abnormal, double threshold) {
    return p_abnormal >= threshold ? DocLabel::Abnormal : DocLabel::Normal;
}

DocLabel classify(const DocumentVerdict& v, double threshold) { return classify(v.p_abnormal, threshold); }

// ---------------------------------------------------------------------------
// /analyze

AnalysisService::AnalysisService(double default_threshold) : default_threshold_(default_threshold) {
    if (!(default_threshold >= 0.0 && default_threshold <= 1.0)) {
        throw ConfigError("threshold must lie in [0,1]");
    }
}

void AnalysisService::set_model(std::shared_ptr<const StudentModel> model) {
    std::lock_guard lock(mu_);
    model_ = std::move(model);
}

std::shared_ptr<const StudentModel> AnalysisService::current() const {
    std::lock_guard lock(mu_);
    return model_;
}

bool AnalysisService::ready() const { return current() != nullptr; }

namespace {

using ojson = nlohmann::ordered_json;

AnalysisService::Response error_response(int status, const std::string& message) {
    return {status, ojson{{"error", message}}.dump()};
}

}  // namespace

AnalysisService::Response AnalysisService::health() const {
    if (!ready()) return {503, ojson{{"status", "loading"}}.dump()};
    return {200, ojson{{"status", "ok"}}.dump()};
}

AnalysisService::Response AnalysisService::analyze(std::string_view request_body) const {
    const auto model = current();
    if (!model) return error_response(503, "model is loading");

    ojson req;
    try {
        req = ojson::parse(request_body);
    } catch (const ojson::parse_error& e) {
        return error_response(400, std::string("invalid JSON: ") + e.what());
    }
    if (!req.is_object() || !req.contains("text") || !req["text"].is_string()) {
        return error_response(400, "body must be an object with a string 'text'");
    }
    const std::string text = req["text"].get<std::string>();
    if (normalize_whitespace(text).empty()) return error_response(400, "text is empty");

    double threshold = default_threshold_;
    if (req.contains("threshold") && !req["threshold"].is_null()) {
        if (!req["threshold"].is_number()) return error_response(400, "threshold must be a number");
        threshold = req["threshold"].get<double>();
        if (!(threshold >= 0.0 && threshold <= 1.0)) {
            return error_response(400, "threshold must lie in [0,1]");
        }
    }

    Report report;
    report.text = text;
    report.sentences = segment(text);

    DocumentVerdict verdict;
    std::vector<SentencePrediction> sentences;
    const bool sentence_level = model->config().num_classes == 3;
    if (sentence_level) {
        verdict = predict_document_skd(*model, report);
        sentences = verdict.sentences;
    } else {
        verdict = predict_document_dkd(*model, text);
        for (std::size_t j = 0; j < report.sentences.size(); ++j) {
            sentences.push_back(predict_sentence(*model, j, report.sentences[j]));
        }
    }

    ojson items = ojson::array();
    for (const auto& s : sentences) {
        items.push_back(ojson{
            {"index", s.index},
            {"text", s.text},
            {"label", std::string(1, to_char(s.label))},
            {"probs", {{"a", s.p_abnormal}, {"n", s.p_normal}, {"u", s.p_uncertain}}},
            {"flagged", s.p_abnormal >= threshold},
        });
    }
    const ojson body{
        {"sentences", items},
        {"doc_prob_abnormal", verdict.p_abnormal},
        {"doc_label", std::string(1, to_char(classify(verdict, threshold)))},
        {"threshold", threshold},
        {"level", sentence_level ? "sentence" : "document"},
    };
    return {200, body.dump()};
}

}  // namespace radkd
