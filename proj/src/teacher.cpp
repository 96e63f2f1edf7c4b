#include "radkd/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include "radkd/error.hpp"
#include "radkd/random.hpp"
#include "radkd/text.hpp"

namespace radkd {

namespace {

std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("HashError", "SHA-256 failed");
    }
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
    return out;
}

constexpr std::string_view kPlaceholder = "{TEXT}";

std::string_view label_word(TeacherLabel l) {
    switch (l) {
        case TeacherLabel::Abnormal: return "abnormal";
        case TeacherLabel::Normal: return "normal";
        case TeacherLabel::Uncertain: return "uncertain";
    }
    return "?";
}

}  // namespace

// ---------------------------------------------------------------------------
// Prompts and reply parsing

void PromptTemplate::validate() const {
    std::size_t count = 0;
    for (std::size_t pos = user_template.find(kPlaceholder); pos != std::string::npos;
         pos = user_template.find(kPlaceholder, pos + kPlaceholder.size())) {
        ++count;
    }
    if (count != 1) {
        throw ConfigError("prompt template must contain exactly one {TEXT}, found " +
                          std::to_string(count));
    }
}

std::string PromptTemplate::render(std::string_view text) const {
    validate();
    std::string out = user_template;
    out.replace(out.find(kPlaceholder), kPlaceholder.size(), text);
    return out;
}

std::string PromptTemplate::hash() const {
    return sha256_hex(system_text + '\0' + user_template + '\0' +
                      (labels == LabelSet::Binary ? "binary" : "ternary"));
}

PromptTemplate PromptTemplate::default_sentence() {
    return {
        "You are a radiologist reviewing chest X-ray report sentences.",
        "Classify the following sentence from a radiology report as abnormal (a), normal (n) "
        "or uncertain (u). Use uncertain when the sentence hedges or the finding cannot be "
        "confirmed. Explain the rationale behind your answer.\n"
        "Answer exactly in this form:\nlabel: <a|n|u>\nreason: <one sentence>\n\n"
        "Sentence: {TEXT}",
        LabelSet::Ternary,
    };
}

PromptTemplate PromptTemplate::default_document() {
    return {
        "You are a radiologist reviewing chest X-ray reports.",
        "Does the following radiology report describe any abnormal finding? Classify it as "
        "abnormal (a) or normal (n) and explain the rationale behind your answer.\n"
        "Answer exactly in this form:\nlabel: <a|n>\nreason: <one sentence>\n\n"
        "Report: {TEXT}",
        LabelSet::Binary,
    };
}

TeacherReply parse_reply(std::string_view raw, LabelSet allowed) {
    static const std::regex label_re(R"(label\s*[:=]\s*[\*"'`\[(<]*\s*([A-Za-z]+))",
                                     std::regex::icase);
    static const std::regex reason_re(R"((?:reason|rationale|explanation)\s*[:=]\s*([\s\S]*))",
                                      std::regex::icase);
    const std::string text(raw);
    std::smatch m;
    if (!std::regex_search(text, m, label_re)) {
        throw TeacherParseError("no 'label:' field in reply");
    }
    const std::string word = to_lower(m[1].str());
    std::optional<TeacherLabel> label;
    if (word == "a" || word == "abnormal") label = TeacherLabel::Abnormal;
    if (word == "n" || word == "normal") label = TeacherLabel::Normal;
    if (word == "u" || word == "uncertain") label = TeacherLabel::Uncertain;
    if (!label || (allowed == LabelSet::Binary && *label == TeacherLabel::Uncertain)) {
        throw TeacherParseError("unexpected label '" + word + "'");
    }

    std::smatch r;
    std::string explanation;
    if (std::regex_search(text, r, reason_re)) explanation = normalize_whitespace(r[1].str());
    if (explanation.empty()) throw TeacherParseError("reply carries no rationale");
    return {*label, std::move(explanation), text};
}

// ---------------------------------------------------------------------------
// Mock teacher

namespace {

const std::set<std::string>& uncertain_markers() {
    static const std::set<std::string> s = {"possible", "possibly", "cannot",    "exclude",
                                            "may",      "questionable", "likely", "versus",
                                            "equivocal", "indeterminate", "suggest", "suspicious"};
    return s;
}

const std::set<std::string>& normal_markers() {
    static const std::set<std::string> s = {"no",       "normal",  "clear",
                                            "unremarkable", "without", "negative"};
    return s;
}

const std::set<std::string>& abnormal_markers() {
    static const std::set<std::string> s = {
        "effusion", "consolidation", "pneumothorax", "opacity",  "edema",   "atelectasis",
        "nodule",   "infiltrate",    "fracture",     "mass",     "cardiomegaly", "scarring",
        "enlarged", "increase",      "increased",    "widened", "worsening"};
    return s;
}

std::vector<std::string> matches(const std::vector<std::string>& tokens,
                                 const std::set<std::string>& markers) {
    std::vector<std::string> out;
    for (const auto& t : tokens) {
        if (markers.contains(t) && std::find(out.begin(), out.end(), t) == out.end()) {
            out.push_back(t);
        }
    }
    return out;
}

}  // namespace

MarkerRule mock_sentence_rule(std::string_view sentence) {
    const auto tokens = word_tokens(sentence);
    if (auto m = matches(tokens, uncertain_markers()); !m.empty()) return {TeacherLabel::Uncertain, m};
    if (auto m = matches(tokens, normal_markers()); !m.empty()) return {TeacherLabel::Normal, m};
    if (auto m = matches(tokens, abnormal_markers()); !m.empty()) return {TeacherLabel::Abnormal, m};
    return {TeacherLabel::Normal, {}};
}

MarkerRule mock_document_rule(std::string_view document) {
    MarkerRule out{TeacherLabel::Normal, {}};
    for (const auto& s : segment(document)) {
        auto r = mock_sentence_rule(s);
        if (r.label == TeacherLabel::Abnormal) {
            out.label = TeacherLabel::Abnormal;
            out.matched.insert(out.matched.end(), r.matched.begin(), r.matched.end());
        }
    }
    return out;
}

MockTeacher::MockTeacher(std::uint64_t seed, double disagreement_rate)
    : seed_(seed), rate_(disagreement_rate) {
    if (!(disagreement_rate >= 0.0 && disagreement_rate <= 1.0)) {
        throw ConfigError("disagreement_rate must lie in [0,1]");
    }
}

std::string MockTeacher::complete(const ChatRequest& req) {
    ++calls_;
    std::string subject = req.subject;
    if (subject.empty() && !req.messages.empty()) subject = req.messages.back().content;

    const MarkerRule rule = req.labels == LabelSet::Binary ? mock_document_rule(subject)
                                                           : mock_sentence_rule(subject);
    Rng rng(mix64(seed_ ^ fnv1a64(subject)) ^ mix64(static_cast<std::uint64_t>(req.extraction) + 1));
    TeacherLabel label = rule.label;
    std::string reason;
    if (rng.bernoulli(rate_)) {
        std::vector<TeacherLabel> others;
        const std::size_t k = req.labels == LabelSet::Binary ? 2 : 3;
        for (std::size_t i = 0; i < k; ++i) {
            if (static_cast<TeacherLabel>(i) != rule.label) others.push_back(static_cast<TeacherLabel>(i));
        }
        label = rng.pick(others);
        reason = "alternative reading sampled";
    } else if (rule.matched.empty()) {
        reason = "nothing abnormal is described";
    } else {
        reason = "the text mentions " + join(rule.matched, " ");
    }
    return fmt::format("label: {}\nreason: {}", label_word(label), reason);
}

// ---------------------------------------------------------------------------
// Cache

LabelCache::LabelCache(std::filesystem::path file) : file_(std::move(file)) {
    std::ifstream in(file_);
    if (!in) return;  // created on first put
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            auto label = parse_sentence_label(j.at("label").get<std::string>());
            if (!label) throw ParseError("invalid label", line_no);
            entries_[{j.at("key").get<std::string>(), j.at("extraction").get<int>()}] =
                TeacherReply{*label, j.at("explanation").get<std::string>(), j.at("raw").get<std::string>()};
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("cache: ") + e.what(), line_no);
        }
    }
}

std::string LabelCache::key(const PromptTemplate& tmpl, std::string_view text) {
    return sha256_hex(tmpl.hash() + ':' + sha256_hex(text));
}

std::optional<TeacherReply> LabelCache::get(const std::string& key, int extraction) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find({key, extraction});
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void LabelCache::put(const std::string& key, int extraction, const TeacherReply& reply) {
    std::unique_lock lock(mu_);
    if (!entries_.emplace(std::make_pair(key, extraction), reply).second) return;
    if (file_.empty()) return;
    std::ofstream out(file_, std::ios::app);
    if (!out) throw Error("IOError", "cannot append to cache " + file_.string());
    nlohmann::ordered_json j{{"key", key},
                             {"extraction", extraction},
                             {"label", std::string(1, to_char(reply.label))},
                             {"explanation", reply.explanation},
                             {"raw", reply.raw}};
    out << j.dump() << '\n';
}

std::size_t LabelCache::size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
}

// ---------------------------------------------------------------------------
// Teacher client

TeacherClient::TeacherClient(std::shared_ptr<ChatEndpoint> endpoint,
                             std::shared_ptr<LabelCache> cache, TeacherOptions opts,
                             PromptTemplate sentence_prompt, PromptTemplate document_prompt)
    : endpoint_(std::move(endpoint)),
      cache_(cache ? std::move(cache) : std::make_shared<LabelCache>()),
      opts_(std::move(opts)),
      sentence_prompt_(std::move(sentence_prompt)),
      document_prompt_(std::move(document_prompt)) {
    sentence_prompt_.validate();
    document_prompt_.validate();
    if (opts_.retry.max_attempts < 1) throw ConfigError("retry.max_attempts must be >= 1");
}

TeacherReply TeacherClient::query_document(const Report& report, int extraction) {
    return query(document_prompt_, report.text, extraction);
}

TeacherReply TeacherClient::query_sentence(std::string_view sentence, int extraction) {
    return query(sentence_prompt_, sentence, extraction);
}

std::string TeacherClient::call_with_retry(const ChatRequest& req) {
    auto delay = opts_.retry.base_delay;
    for (int attempt = 1;; ++attempt) {
        ++network_calls_;
        try {
            return endpoint_->complete(req);
        } catch (const TransientError& e) {
            if (attempt >= opts_.retry.max_attempts) {
                throw TeacherUnavailable(fmt::format("giving up after {} attempts: {}", attempt, e.what()));
            }
            spdlog::warn("teacher request failed (attempt {}/{}): {}", attempt,
                         opts_.retry.max_attempts, e.what());
            std::this_thread::sleep_for(delay);
            delay = std::chrono::milliseconds(
                static_cast<long long>(static_cast<double>(delay.count()) * opts_.retry.multiplier));
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            throw TeacherUnavailable(e.what());
        }
    }
}

TeacherReply TeacherClient::query(const PromptTemplate& tmpl, std::string_view text, int extraction) {
    const std::string key = LabelCache::key(tmpl, text);
    if (auto hit = cache_->get(key, extraction)) return *hit;

    ChatRequest req;
    req.model = opts_.model;
    req.temperature = opts_.temperature;
    req.extraction = extraction;
    req.subject = std::string(text);
    req.labels = tmpl.labels;
    req.messages = {{"system", tmpl.system_text}, {"user", tmpl.render(text)}};

    std::string raw = call_with_retry(req);
    TeacherReply reply;
    try {
        reply = parse_reply(raw, tmpl.labels);
    } catch (const TeacherParseError& first) {
        spdlog::debug("unparseable teacher reply ({}), asking again", first.what());
        req.messages.push_back({"assistant", raw});
        req.messages.push_back(
            {"user", tmpl.labels == LabelSet::Binary
                         ? "Your answer could not be read. Reply exactly as:\nlabel: <a|n>\nreason: <one sentence>"
                         : "Your answer could not be read. Reply exactly as:\nlabel: <a|n|u>\nreason: <one sentence>"});
        raw = call_with_retry(req);
        reply = parse_reply(raw, tmpl.labels);
    }
    cache_->put(key, extraction, reply);
    return reply;
}

// ---------------------------------------------------------------------------
// Confidence embedding

double cosine(const Embedding& a, const Embedding& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (const auto& [_, v] : a) na += v * v;
    for (const auto& [_, v] : b) nb += v * v;
    if (na == 0.0 || nb == 0.0) throw ConfidenceUnavailable("zero embedding");
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        if (a[i].first == b[j].first) {
            dot += a[i++].second * b[j++].second;
        } else if (a[i].first < b[j].first) {
            ++i;
        } else {
            ++j;
        }
    }
    return dot / std::sqrt(na * nb);
}

Embedding TermFrequencyEmbedder::embed(std::string_view text) const {
    std::map<std::uint64_t, double> counts;
    for (const auto& t : word_tokens(text)) counts[fnv1a64(t)] += 1.0;
    if (counts.empty()) throw ConfidenceUnavailable("text has no tokens to embed");
    return {counts.begin(), counts.end()};
}

// ---------------------------------------------------------------------------
// Ensemble protocol

bool is_two_one_split(const std::array<TeacherLabel, 3>& l) {
    const int eq = (l[0] == l[1]) + (l[0] == l[2]) + (l[1] == l[2]);
    return eq == 1;
}

std::optional<TeacherLabel> ensemble_decision(const std::array<TeacherLabel, 3>& l,
                                              const std::array<double, 3>& conf) {
    if (l[0] == l[1] && l[1] == l[2]) return l[0];
    if (!is_two_one_split(l)) return std::nullopt;
    std::size_t minority = 0;
    if (l[1] != l[0] && l[1] != l[2]) minority = 1;
    if (l[2] != l[0] && l[2] != l[1]) minority = 2;
    double majority_sum = 0.0;
    TeacherLabel majority = l[(minority + 1) % 3];
    for (std::size_t i = 0; i < 3; ++i) {
        if (i != minority) majority_sum += conf[i];
    }
    if (majority_sum / 2.0 > conf[minority]) return majority;
    return std::nullopt;
}

EnsembleVerdict ensemble_label(std::string_view sentence, TeacherClient& teacher,
                               const Embedder& embedder) {
    EnsembleVerdict v;
    std::array<TeacherLabel, 3> labels{};
    try {
        for (int e = 0; e < 3; ++e) {
            v.replies[static_cast<std::size_t>(e)] = teacher.query_sentence(sentence, e);
            labels[static_cast<std::size_t>(e)] = v.replies[static_cast<std::size_t>(e)].label;
        }
    } catch (const TeacherParseError& e) {
        v.reason = std::string("unparseable teacher reply: ") + e.what();
        spdlog::debug("rejecting sentence: {}", v.reason);
        return v;
    }

    std::array<double, 3> conf{0.0, 0.0, 0.0};
    if (is_two_one_split(labels)) {
        try {
            const Embedding input = embedder.embed(sentence);
            for (std::size_t i = 0; i < 3; ++i) {
                conf[i] = cosine(input, embedder.embed(v.replies[i].explanation));
            }
            v.confidences = conf;
        } catch (const ConfidenceUnavailable& e) {
            v.reason = std::string("confidence unavailable: ") + e.what();
            spdlog::warn("rejecting sentence: {}", v.reason);
            return v;
        }
    }
    v.label = ensemble_decision(labels, conf);
    v.accepted = v.label.has_value();
    if (v.accepted) {
        v.reason = v.confidences ? "majority with higher confidence" : "unanimous";
    } else {
        v.reason = v.confidences ? "majority confidence not above minority" : "all extractions differ";
    }
    return v;
}

FilterResult filter_documents(std::span<const DocumentVerdicts> docs) {
    RetentionStats stats;
    std::vector<LabeledDocument> kept;
    for (const auto& d : docs) {
        if (d.verdicts.size() != d.report.sentences.size()) {
            throw ConfigError(d.report.doc_id + ": one verdict per sentence required");
        }
        ++stats.documents_total;
        stats.sentences_total += d.verdicts.size();
        const bool all_accepted = std::all_of(d.verdicts.begin(), d.verdicts.end(),
                                              [](const EnsembleVerdict& v) { return v.accepted; });
        if (!all_accepted) continue;
        LabeledDocument doc;
        doc.report = d.report;
        doc.split = d.split;
        for (const auto& v : d.verdicts) doc.sentence_labels.push_back(*v.label);
        doc.high_confidence.assign(d.verdicts.size(), true);
        doc.doc_label = derive_doc_label(doc.sentence_labels);
        ++stats.documents_kept;
        stats.sentences_kept += d.verdicts.size();
        kept.push_back(std::move(doc));
    }
    return {LabeledDataset(std::move(kept)), stats};
}

std::vector<DocumentVerdicts> label_reports(std::span<const LabeledDocument> docs,
                                            TeacherClient& teacher, const Embedder& embedder,
                                            const LabelJobOptions& opts) {
    std::vector<DocumentVerdicts> out(docs.size());
    std::vector<std::pair<std::size_t, std::size_t>> items;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        out[i].report = docs[i].report;
        out[i].split = docs[i].split;
        out[i].verdicts.resize(docs[i].report.sentences.size());
        for (std::size_t j = 0; j < docs[i].report.sentences.size(); ++j) items.emplace_back(i, j);
    }

    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
        while (!failed.load()) {
            const std::size_t k = next.fetch_add(1);
            if (k >= items.size()) return;
            const auto [i, j] = items[k];
            try {
                out[i].verdicts[j] = ensemble_label(docs[i].report.sentences[j], teacher, embedder);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
                failed = true;
            }
        }
    };
    const std::size_t n_workers = std::max<std::size_t>(1, std::min(opts.parallelism, items.size()));
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
        worker();
    }
    if (error) std::rethrow_exception(error);
    return out;
}

}  // namespace radkd
