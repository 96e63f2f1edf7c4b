#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "radkd/corpus.hpp"

namespace radkd {

/// Label produced by a teacher query. Document queries only ever yield
/// Abnormal or Normal.
using TeacherLabel = SentenceLabel;

enum class LabelSet : std::uint8_t { Binary, Ternary };

struct PromptTemplate {
    std::string system_text;
    std::string user_template;  // contains exactly one {TEXT}
    LabelSet labels = LabelSet::Ternary;

    /// Throws ConfigError when the placeholder count is not exactly one.
    void validate() const;
    std::string render(std::string_view text) const;
    /// Stable content hash (hex) used in cache keys.
    std::string hash() const;

    static PromptTemplate default_sentence();
    static PromptTemplate default_document();
};

struct TeacherReply {
    TeacherLabel label = TeacherLabel::Normal;
    std::string explanation;
    std::string raw;

    bool operator==(const TeacherReply&) const = default;
};

/// Parses "label: <a|n|u|abnormal|normal|uncertain>" plus an optional
/// "reason: ..." rationale from free text. Throws TeacherParseError when no
/// label from `allowed` can be found or the rationale is missing.
TeacherReply parse_reply(std::string_view raw, LabelSet allowed);

struct ChatMessage {
    std::string role;
    std::string content;
};

struct ChatRequest {
    std::string model;
    std::vector<ChatMessage> messages;
    double temperature = 0.7;
    /// Which of the independent extractions this is. Endpoints that sample
    /// may ignore it; the mock uses it to draw independent replies.
    int extraction = 0;
    /// The raw input text the prompt was rendered from. Not sent over HTTP.
    std::string subject;
    LabelSet labels = LabelSet::Ternary;
};

/// Thrown by endpoints for failures worth retrying (timeouts, 429, 5xx).
class TransientError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A chat-completion style endpoint returning the assistant's text.
class ChatEndpoint {
public:
    virtual ~ChatEndpoint() = default;
    virtual std::string complete(const ChatRequest& req) = 0;
};

/// OpenAI-compatible /chat/completions client over HTTP(S).
class HttpChatEndpoint final : public ChatEndpoint {
public:
    /// `url` is either a base ("https://host") or a full completions URL.
    HttpChatEndpoint(std::string url, std::string api_key,
                     std::chrono::seconds timeout = std::chrono::seconds(60));
    std::string complete(const ChatRequest& req) override;

    static std::string request_body(const ChatRequest& req);
    /// Extracts choices[0].message.content; throws TeacherParseError.
    static std::string response_content(std::string_view body);

private:
    std::string scheme_host_;
    std::string path_;
    std::string api_key_;
    std::chrono::seconds timeout_;
};

/// Marker-token rules matching the synthetic generator's template pools.
struct MarkerRule {
    TeacherLabel label;
    std::vector<std::string> matched;  // marker tokens that fired
};
MarkerRule mock_sentence_rule(std::string_view sentence);
MarkerRule mock_document_rule(std::string_view document);

/// Offline stand-in teacher. The base label comes from the marker rules;
/// each extraction independently flips, with probability `disagreement_rate`,
/// to a uniformly chosen other label. Draws depend only on (seed, subject,
/// extraction), so results are independent of call order.
class MockTeacher final : public ChatEndpoint {
public:
    MockTeacher(std::uint64_t seed, double disagreement_rate);
    std::string complete(const ChatRequest& req) override;

    std::size_t calls() const { return calls_.load(); }

private:
    std::uint64_t seed_;
    double rate_;
    std::atomic<std::size_t> calls_{0};
};

/// Append-only JSONL cache of teacher replies keyed by
/// (template hash, input hash, extraction index).
class LabelCache {
public:
    LabelCache() = default;  // in-memory only
    explicit LabelCache(std::filesystem::path file);

    static std::string key(const PromptTemplate& tmpl, std::string_view text);

    std::optional<TeacherReply> get(const std::string& key, int extraction) const;
    void put(const std::string& key, int extraction, const TeacherReply& reply);
    std::size_t size() const;

private:
    std::filesystem::path file_;
    mutable std::shared_mutex mu_;
    std::map<std::pair<std::string, int>, TeacherReply> entries_;
};

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds base_delay{500};
    double multiplier = 2.0;
};

struct TeacherOptions {
    std::string model = "gpt-3.5-turbo";
    double temperature = 0.7;
    RetryPolicy retry;
};

/// Teacher functions for documents and sentences over a ChatEndpoint, with
/// caching, bounded retries and one repair re-ask on unparseable replies.
class TeacherClient {
public:
    TeacherClient(std::shared_ptr<ChatEndpoint> endpoint, std::shared_ptr<LabelCache> cache,
                  TeacherOptions opts = {},
                  PromptTemplate sentence_prompt = PromptTemplate::default_sentence(),
                  PromptTemplate document_prompt = PromptTemplate::default_document());

    /// Binary document label. Throws TeacherParseError / TeacherUnavailable.
    TeacherReply query_document(const Report& report, int extraction = 0);
    /// Ternary sentence label.
    TeacherReply query_sentence(std::string_view sentence, int extraction = 0);

    /// Requests that actually reached the endpoint (cache misses, retries
    /// and repairs included).
    std::size_t network_calls() const { return network_calls_.load(); }

private:
    TeacherReply query(const PromptTemplate& tmpl, std::string_view text, int extraction);
    std::string call_with_retry(const ChatRequest& req);

    std::shared_ptr<ChatEndpoint> endpoint_;
    std::shared_ptr<LabelCache> cache_;
    TeacherOptions opts_;
    PromptTemplate sentence_prompt_;
    PromptTemplate document_prompt_;
    std::atomic<std::size_t> network_calls_{0};
};

/// Sparse vector, sorted by index.
using Embedding = std::vector<std::pair<std::uint64_t, double>>;

double cosine(const Embedding& a, const Embedding& b);

class Embedder {
public:
    virtual ~Embedder() = default;
    /// Throws ConfidenceUnavailable on failure.
    virtual Embedding embed(std::string_view text) const = 0;
};

/// Term-frequency vector over lowercased word tokens.
class TermFrequencyEmbedder final : public Embedder {
public:
    Embedding embed(std::string_view text) const override;
};

struct EnsembleVerdict {
    bool accepted = false;
    std::optional<TeacherLabel> label;
    std::array<TeacherReply, 3> replies;
    /// Similarity of each explanation to the input; only computed when
    /// exactly two replies agree.
    std::optional<std::array<double, 3>> confidences;
    std::string reason;
};

/// Pure decision rule over three labels. Unanimity accepts; all-distinct
/// rejects; a 2-1 split accepts the majority iff the mean confidence of the
/// majority replies is strictly higher than the minority reply's.
/// `confidences` is only consulted in the 2-1 case.
std::optional<TeacherLabel> ensemble_decision(const std::array<TeacherLabel, 3>& labels,
                                              const std::array<double, 3>& confidences);
bool is_two_one_split(const std::array<TeacherLabel, 3>& labels);

EnsembleVerdict ensemble_label(std::string_view sentence, TeacherClient& teacher,
                               const Embedder& embedder);

struct RetentionStats {
    std::size_t documents_total = 0;
    std::size_t documents_kept = 0;
    std::size_t sentences_total = 0;
    std::size_t sentences_kept = 0;
};

struct DocumentVerdicts {
    Report report;
    Split split = Split::Train;
    std::vector<EnsembleVerdict> verdicts;  // one per sentence
};

struct FilterResult {
    LabeledDataset dataset;
    RetentionStats stats;
};

/// Keeps exactly the documents whose sentences were all accepted.
FilterResult filter_documents(std::span<const DocumentVerdicts> docs);

struct LabelJobOptions {
    std::size_t parallelism = 4;
};

/// Runs ensemble_label over every sentence of every report with a bounded
/// number of in-flight requests. Output order follows input order.
std::vector<DocumentVerdicts> label_reports(std::span<const LabeledDocument> docs,
                                            TeacherClient& teacher, const Embedder& embedder,
                                            const LabelJobOptions& opts = {});

}  // namespace radkd
