#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace radkd {

/// Ternary sentence label. The numeric value is the class index used by the
/// student (a=0, n=1, u=2), so a document label's index coincides with the
/// first two sentence classes.
enum class SentenceLabel : std::uint8_t { Abnormal = 0, Normal = 1, Uncertain = 2 };

/// Binary document label, a=0 and n=1.
enum class DocLabel : std::uint8_t { Abnormal = 0, Normal = 1 };

enum class Split : std::uint8_t { Train, Test };

char to_char(SentenceLabel l);
char to_char(DocLabel l);
std::string_view to_string(Split s);

/// Accepts the single-letter codes only ("a", "n", "u").
std::optional<SentenceLabel> parse_sentence_label(std::string_view s);
std::optional<DocLabel> parse_doc_label(std::string_view s);
std::optional<Split> parse_split(std::string_view s);

struct Report {
    std::string doc_id;
    std::string text;
    std::vector<std::string> sentences;

    bool operator==(const Report&) const = default;
};

struct LabeledDocument {
    Report report;
    DocLabel doc_label = DocLabel::Normal;
    /// Empty for document-only datasets (labelled at document level only).
    std::vector<SentenceLabel> sentence_labels;
    std::vector<bool> high_confidence;
    Split split = Split::Train;

    bool has_sentence_labels() const { return !sentence_labels.empty(); }
    bool operator==(const LabeledDocument&) const = default;
};

struct DatasetCounts {
    std::size_t documents = 0;
    std::size_t normal_documents = 0;
    std::size_t abnormal_documents = 0;
    std::size_t sentences = 0;
    std::size_t abnormal_sentences = 0;
    std::size_t normal_sentences = 0;
    std::size_t uncertain_sentences = 0;
};

/// Collection of labelled documents. Construction validates every invariant
/// (unique ids, one label per sentence, split tags) and the value is
/// immutable afterwards.
class LabeledDataset {
public:
    LabeledDataset() = default;
    explicit LabeledDataset(std::vector<LabeledDocument> docs);

    std::span<const LabeledDocument> documents() const { return docs_; }
    std::size_t size() const { return docs_.size(); }
    bool empty() const { return docs_.empty(); }
    const LabeledDocument& operator[](std::size_t i) const { return docs_[i]; }

    DatasetCounts counts() const;
    /// True when every document carries sentence labels.
    bool has_sentence_labels() const;
    LabeledDataset subset(Split split) const;

    bool operator==(const LabeledDataset&) const = default;

private:
    std::vector<LabeledDocument> docs_;
};

/// Splits a report into sentences at `.`, `!` or `?` followed by whitespace.
/// Protected abbreviations and decimal numbers never end a sentence.
/// Throws EmptyReport for blank input.
std::vector<std::string> segment(std::string_view text);

/// `a` iff any sentence is abnormal. Throws EmptyDocument on an empty list.
DocLabel derive_doc_label(std::span<const SentenceLabel> labels);

struct SynthSpec {
    std::size_t n_docs = 100;
    std::size_t min_sentences = 4;
    std::size_t max_sentences = 8;
    /// Abnormal-sentence share inside an abnormal document. When
    /// `abnormal_fraction_range` is set, each abnormal document draws its own
    /// share uniformly from that range instead.
    double abnormal_fraction = 0.3;
    std::optional<std::pair<double, double>> abnormal_fraction_range;
    /// Probability that a document is drawn as abnormal; normal documents
    /// carry no abnormal sentences.
    double abnormal_doc_rate = 1.0;
    double uncertain_fraction = 0.2;
    /// The last `test_docs` of the generated documents are tagged as test.
    std::size_t test_docs = 0;
    std::uint64_t seed = 0;

    /// Throws InvalidSpec.
    void validate() const;
};

/// Deterministic synthetic corpus; the ground-truth sentence label of each
/// sentence is the template pool it was drawn from.
LabeledDataset generate_synthetic(const SynthSpec& spec);

/// One JSON object per line, see README for the schema.
std::string to_jsonl(const LabeledDataset& ds);
LabeledDataset from_jsonl(std::string_view text);

void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace radkd
