#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "radkd/corpus.hpp"
#include "radkd/model.hpp"

namespace radkd {

struct SentencePrediction {
    std::size_t index = 0;
    std::string text;
    double p_abnormal = 0.0, p_normal = 0.0, p_uncertain = 0.0;
    SentenceLabel label = SentenceLabel::Normal;
    Eigen::VectorXd latent;
};

struct DocumentVerdict {
    double p_abnormal = 0.0;
    double p_normal = 1.0;
    std::vector<SentencePrediction> sentences;  // sentence-level models only
    Eigen::VectorXd latent;                     // document-level models only
};

/// Argmax with ties resolved in the order a > n > u.
SentenceLabel argmax_label(double pa, double pn, double pu);

/// Builds a verdict from abnormal probabilities of each sentence: p_a is
/// their maximum and p_n its complement.
DocumentVerdict aggregate_max(std::vector<SentencePrediction> sentences);

/// Whole-report forward of a two-class model. Throws EmptyReport.
DocumentVerdict predict_document_dkd(const StudentModel& model, std::string_view report);
/// Per-sentence forward of a three-class model, then max aggregation.
DocumentVerdict predict_document_skd(const StudentModel& model, const Report& report);
DocumentVerdict predict_document_skd(const StudentModel& model, std::string_view report);

/// `a` iff p_a >= threshold.
DocLabel classify(const DocumentVerdict& v, double threshold);
DocLabel classify(double p_abnormal, double threshold);

/// JSON request handling behind the /analyze endpoint, separated from the
/// socket layer so it can be exercised directly.
class AnalysisService {
public:
    explicit AnalysisService(double default_threshold = 0.5);

    void set_model(std::shared_ptr<const StudentModel> model);
    bool ready() const;

    struct Response {
        int status;
        std::string body;
    };
    Response analyze(std::string_view request_body) const;
    Response health() const;

private:
    std::shared_ptr<const StudentModel> current() const;

    mutable std::mutex mu_;
    std::shared_ptr<const StudentModel> model_;
    double default_threshold_;
};

struct ServeOptions {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t workers = 4;
    std::string cors_origin = "*";
};

/// Blocks serving HTTP until `stop_serving()` is called (e.g. from a signal
/// handler). Throws Error when the address cannot be bound.
void serve(std::shared_ptr<AnalysisService> service, const ServeOptions& opts);
void stop_serving();

/// Port actually bound by the running server (0 before startup); useful with
/// port 0 in tests.
int bound_port();

}  // namespace radkd
