#include "radkd/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "radkd/error.hpp"
#include "radkd/random.hpp"
#include "radkd/text.hpp"

namespace radkd {

using ojson = nlohmann::ordered_json;

char to_char(SentenceLabel l) {
    switch (l) {
        case SentenceLabel::Abnormal: return 'a';
        case SentenceLabel::Normal: return 'n';
        case SentenceLabel::Uncertain: return 'u';
    }
    return '?';
}

char to_char(DocLabel l) { return l == DocLabel::Abnormal ? 'a' : 'n'; }

std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

std::optional<SentenceLabel> parse_sentence_label(std::string_view s) {
    if (s == "a") return SentenceLabel::Abnormal;
    if (s == "n") return SentenceLabel::Normal;
    if (s == "u") return SentenceLabel::Uncertain;
    return std::nullopt;
}

std::optional<DocLabel> parse_doc_label(std::string_view s) {
    if (s == "a") return DocLabel::Abnormal;
    if (s == "n") return DocLabel::Normal;
    return std::nullopt;
}

std::optional<Split> parse_split(std::string_view s) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Dataset

LabeledDataset::LabeledDataset(std::vector<LabeledDocument> docs) : docs_(std::move(docs)) {
    std::unordered_set<std::string> ids;
    for (const auto& d : docs_) {
        const auto& r = d.report;
        if (!ids.insert(r.doc_id).second) {
            throw InvalidDataset("duplicate doc_id '" + r.doc_id + "'");
        }
        if (r.sentences.empty()) throw InvalidDataset(r.doc_id + ": no sentences");
        for (const auto& s : r.sentences) {
            if (normalize_whitespace(s).empty()) {
                throw InvalidDataset(r.doc_id + ": empty sentence");
            }
        }
        if (join(r.sentences, " ") != normalize_whitespace(r.text)) {
            throw InvalidDataset(r.doc_id + ": sentences do not reassemble the text");
        }
        if (d.has_sentence_labels()) {
            if (d.sentence_labels.size() != r.sentences.size()) {
                throw InvalidDataset(r.doc_id + ": sentence label count mismatch");
            }
            if (d.high_confidence.size() != r.sentences.size()) {
                throw InvalidDataset(r.doc_id + ": high_confidence count mismatch");
            }
            if (derive_doc_label(d.sentence_labels) != d.doc_label) {
                throw InvalidDataset(r.doc_id + ": doc_label disagrees with sentence labels");
            }
        } else if (!d.high_confidence.empty()) {
            throw InvalidDataset(r.doc_id + ": high_confidence without sentence labels");
        }
    }
}

DatasetCounts LabeledDataset::counts() const {
    DatasetCounts c;
    c.documents = docs_.size();
    for (const auto& d : docs_) {
        (d.doc_label == DocLabel::Abnormal ? c.abnormal_documents : c.normal_documents)++;
        c.sentences += d.report.sentences.size();
        for (auto l : d.sentence_labels) {
            switch (l) {
                case SentenceLabel::Abnormal: ++c.abnormal_sentences; break;
                case SentenceLabel::Normal: ++c.normal_sentences; break;
                case SentenceLabel::Uncertain: ++c.uncertain_sentences; break;
            }
        }
    }
    return c;
}

bool LabeledDataset::has_sentence_labels() const {
    return std::all_of(docs_.begin(), docs_.end(),
                       [](const auto& d) { return d.has_sentence_labels(); });
}

LabeledDataset LabeledDataset::subset(Split split) const {
    std::vector<LabeledDocument> out;
    std::copy_if(docs_.begin(), docs_.end(), std::back_inserter(out),
                 [&](const auto& d) { return d.split == split; });
    return LabeledDataset(std::move(out));
}

// ---------------------------------------------------------------------------
// Segmentation

namespace {

const std::unordered_set<std::string>& protected_abbreviations() {
    static const std::unordered_set<std::string> abbrevs = {
        "dr.", "mr.", "mrs.", "ms.", "prof.", "e.g.", "i.e.", "a.m.", "p.m.", "vs.",
        "approx.", "cf.", "fig.", "st.", "no.", "ca.", "resp.",
    };
    return abbrevs;
}

bool is_terminal(char c) { return c == '.' || c == '!' || c == '?'; }

}  // namespace

std::vector<std::string> segment(std::string_view text) {
    const std::string norm = normalize_whitespace(text);
    if (norm.empty()) throw EmptyReport("report text is empty");

    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < norm.size(); ++i) {
        if (!is_terminal(norm[i])) continue;
        // Only a terminal followed by a space (or end of text) can split, so
        // decimals such as "1.2" are never broken.
        if (i + 1 < norm.size() && norm[i + 1] != ' ') continue;
        if (norm[i] == '.') {
            const std::size_t tok_begin = norm.rfind(' ', i);
            const std::size_t b = tok_begin == std::string::npos ? 0 : tok_begin + 1;
            if (protected_abbreviations().contains(to_lower(norm.substr(b, i + 1 - b)))) {
                continue;
            }
        }
        out.push_back(norm.substr(start, i + 1 - start));
        start = i + 2;
    }
    if (start < norm.size()) out.push_back(norm.substr(start));
    return out;
}

DocLabel derive_doc_label(std::span<const SentenceLabel> labels) {
    if (labels.empty()) throw EmptyDocument("no sentence labels");
    const bool any_abnormal = std::any_of(labels.begin(), labels.end(), [](SentenceLabel l) {
        return l == SentenceLabel::Abnormal;
    });
    return any_abnormal ? DocLabel::Abnormal : DocLabel::Normal;
}

// ---------------------------------------------------------------------------
// Synthetic generation

void SynthSpec::validate() const {
    auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (n_docs == 0) throw InvalidSpec("n_docs must be positive");
    if (min_sentences == 0 || min_sentences > max_sentences) {
        throw InvalidSpec("sentences_per_doc range must satisfy 1 <= min <= max");
    }
    if (!in_unit(abnormal_fraction)) throw InvalidSpec("abnormal_fraction outside [0,1]");
    if (!in_unit(uncertain_fraction)) throw InvalidSpec("uncertain_fraction outside [0,1]");
    if (!in_unit(abnormal_doc_rate)) throw InvalidSpec("abnormal_doc_rate outside [0,1]");
    double hi = abnormal_fraction;
    if (abnormal_fraction_range) {
        const auto [lo, h] = *abnormal_fraction_range;
        if (!in_unit(lo) || !in_unit(h) || lo > h) {
            throw InvalidSpec("abnormal_fraction_range must be a sub-interval of [0,1]");
        }
        hi = h;
    }
    if (hi + uncertain_fraction > 1.0 + 1e-12) {
        throw InvalidSpec("abnormal and uncertain fractions sum above 1");
    }
    if (test_docs > n_docs) throw InvalidSpec("test_docs exceeds n_docs");
}

namespace {

struct Vocab {
    std::vector<std::string> findings = {
        "effusion", "consolidation", "pneumothorax", "opacity", "edema",  "atelectasis",
        "nodule",   "infiltrate",    "fracture",     "mass",    "cardiomegaly", "scarring",
    };
    std::vector<std::string> sides = {"right", "left", "bilateral"};
    std::vector<std::string> regions = {"lower lobe", "upper lobe", "lung base", "apex",
                                        "mid lung zone", "costophrenic angle", "hilar region"};
    std::vector<std::string> sizes = {"small", "moderate", "large", "mild", "new"};
    std::vector<std::string> organs = {"heart", "cardiac silhouette", "mediastinum", "aorta",
                                       "hilum"};

    // {F} finding, {G} second finding, {S} side, {R} region, {Z} size, {O} organ
    std::vector<std::string> normal = {
        "No {F}.",
        "No {Z} {F} is seen.",
        "There is no {F} in the {S} {R}.",
        "No evidence of {F} at the {S} {R}.",
        "The {O} is normal.",
        "The {O} is unremarkable.",
        "The lungs are clear without {F}.",
        "Negative for {F} compared with the prior study.",
        "The {S} {R} is clear.",
        "No {Z} {F} or {G} compared with the prior study.",
    };
    std::vector<std::string> abnormal = {
        "There is a {Z} {F} in the {S} {R}.",
        "{Z} {F} at the {S} {R}.",
        "{F} is seen in the {S} {R}.",
        "Interval increase in {F} compared with the prior study.",
        "The {O} is enlarged.",
        "There is {Z} {F} with {G}.",
        "The {S} {R} shows {F}.",
        "{F} and {G} in the {S} {R}.",
    };
    std::vector<std::string> uncertain = {
        "Cannot exclude {F} in the {S} {R}.",
        "Possible {Z} {F} at the {S} {R}.",
        "{F} may be present in the {S} {R}.",
        "Questionable {F} compared with the prior study.",
        "Findings are likely {F} versus {G}.",
        "Equivocal {F} in the {S} {R}.",
        "Indeterminate density which may represent {F}.",
    };
};

const Vocab& vocab() {
    static const Vocab v;
    return v;
}

std::string fill(const std::string& tmpl, Rng& rng) {
    const auto& v = vocab();
    const std::string f = rng.pick(v.findings);
    std::string g = rng.pick(v.findings);
    while (g == f) g = rng.pick(v.findings);
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
        if (tmpl[i] == '{' && i + 2 < tmpl.size() && tmpl[i + 2] == '}') {
            switch (tmpl[i + 1]) {
                case 'F': out += f; break;
                case 'G': out += g; break;
                case 'S': out += rng.pick(v.sides); break;
                case 'R': out += rng.pick(v.regions); break;
                case 'Z': out += rng.pick(v.sizes); break;
                case 'O': out += rng.pick(v.organs); break;
                default: out.append(tmpl, i, 3);
            }
            i += 2;
        } else {
            out += tmpl[i];
        }
    }
    out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
    return out;
}

std::size_t stochastic_round(double x, Rng& rng) {
    const double fl = std::floor(x);
    return static_cast<std::size_t>(fl) + (rng.bernoulli(x - fl) ? 1 : 0);
}

}  // namespace

LabeledDataset generate_synthetic(const SynthSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const auto& v = vocab();

    std::vector<LabeledDocument> docs;
    docs.reserve(spec.n_docs);
    for (std::size_t i = 0; i < spec.n_docs; ++i) {
        const std::size_t n =
            spec.min_sentences + rng.below(spec.max_sentences - spec.min_sentences + 1);
        const bool abnormal_doc = rng.bernoulli(spec.abnormal_doc_rate);

        double frac = 0.0;
        if (abnormal_doc) {
            frac = spec.abnormal_fraction_range
                       ? rng.uniform(spec.abnormal_fraction_range->first,
                                     spec.abnormal_fraction_range->second)
                       : spec.abnormal_fraction;
        }
        const std::size_t n_abn = std::min(n, stochastic_round(frac * static_cast<double>(n), rng));
        const std::size_t n_unc =
            std::min(n - n_abn, stochastic_round(spec.uncertain_fraction * static_cast<double>(n), rng));

        std::vector<SentenceLabel> labels(n, SentenceLabel::Normal);
        std::fill_n(labels.begin(), n_abn, SentenceLabel::Abnormal);
        std::fill_n(labels.begin() + static_cast<std::ptrdiff_t>(n_abn), n_unc,
                    SentenceLabel::Uncertain);
        rng.shuffle(labels);

        LabeledDocument doc;
        doc.report.doc_id = fmt::format("synth-{}-{:06d}", spec.seed, i);
        for (auto l : labels) {
            const auto& pool = l == SentenceLabel::Abnormal ? v.abnormal
                               : l == SentenceLabel::Normal ? v.normal
                                                            : v.uncertain;
            doc.report.sentences.push_back(fill(rng.pick(pool), rng));
        }
        doc.report.text = join(doc.report.sentences, " ");
        doc.sentence_labels = std::move(labels);
        doc.high_confidence.assign(n, true);
        doc.doc_label = derive_doc_label(doc.sentence_labels);
        doc.split = i + spec.test_docs >= spec.n_docs ? Split::Test : Split::Train;
        docs.push_back(std::move(doc));
    }
    return LabeledDataset(std::move(docs));
}

// ---------------------------------------------------------------------------
// JSONL persistence

std::string to_jsonl(const LabeledDataset& ds) {
    std::string out;
    for (const auto& d : ds.documents()) {
        ojson j;
        j["doc_id"] = d.report.doc_id;
        j["text"] = d.report.text;
        j["sentences"] = d.report.sentences;
        if (d.has_sentence_labels()) {
            ojson labels = ojson::array();
            for (auto l : d.sentence_labels) labels.push_back(std::string(1, to_char(l)));
            j["sentence_labels"] = std::move(labels);
            ojson hc = ojson::array();
            for (bool b : d.high_confidence) hc.push_back(b);
            j["high_confidence"] = std::move(hc);
        } else {
            j["sentence_labels"] = nullptr;
            j["high_confidence"] = nullptr;
        }
        j["doc_label"] = std::string(1, to_char(d.doc_label));
        j["split"] = to_string(d.split);
        out += j.dump();
        out += '\n';
    }
    return out;
}

namespace {

const ojson& require(const ojson& j, const char* key, std::size_t line) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(std::string("missing field '") + key + "'", line);
    return *it;
}

std::string require_string(const ojson& j, const char* key, std::size_t line) {
    const auto& v = require(j, key, line);
    if (!v.is_string()) throw ParseError(std::string("field '") + key + "' must be a string", line);
    return v.get<std::string>();
}

LabeledDocument parse_document(const std::string& raw, std::size_t line) {
    ojson j;
    try {
        j = ojson::parse(raw);
    } catch (const ojson::parse_error& e) {
        throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    if (!j.is_object()) throw ParseError("expected a JSON object", line);

    LabeledDocument d;
    d.report.doc_id = require_string(j, "doc_id", line);
    d.report.text = require_string(j, "text", line);
    const auto& sents = require(j, "sentences", line);
    if (!sents.is_array()) throw ParseError("'sentences' must be an array", line);
    for (const auto& s : sents) {
        if (!s.is_string()) throw ParseError("sentence must be a string", line);
        d.report.sentences.push_back(s.get<std::string>());
    }

    const auto& labels = require(j, "sentence_labels", line);
    const auto& hc = require(j, "high_confidence", line);
    if (!labels.is_null()) {
        if (!labels.is_array()) throw ParseError("'sentence_labels' must be an array", line);
        for (const auto& l : labels) {
            auto parsed = l.is_string() ? parse_sentence_label(l.get<std::string>()) : std::nullopt;
            if (!parsed) throw ParseError("invalid sentence label " + l.dump(), line);
            d.sentence_labels.push_back(*parsed);
        }
        if (!hc.is_array()) throw ParseError("'high_confidence' must be an array", line);
        for (const auto& b : hc) {
            if (!b.is_boolean()) throw ParseError("high_confidence entries must be booleans", line);
            d.high_confidence.push_back(b.get<bool>());
        }
    } else if (!hc.is_null()) {
        throw ParseError("'high_confidence' must be null when sentence_labels is null", line);
    }

    auto doc_label = parse_doc_label(require_string(j, "doc_label", line));
    if (!doc_label) throw ParseError("invalid doc_label", line);
    d.doc_label = *doc_label;
    auto split = parse_split(require_string(j, "split", line));
    if (!split) throw ParseError("invalid split", line);
    d.split = *split;
    return d;
}

}  // namespace

LabeledDataset from_jsonl(std::string_view text) {
    std::vector<LabeledDocument> docs;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t nl = text.find('\n', pos);
        const std::string line(text.substr(pos, nl == std::string_view::npos ? text.npos : nl - pos));
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        ++line_no;
        if (line.empty()) continue;
        docs.push_back(parse_document(line, line_no));
        try {
            // Validate incrementally so errors carry the offending line.
            LabeledDataset({docs.back()});
        } catch (const InvalidDataset& e) {
            throw ParseError(e.what(), line_no);
        }
    }
    try {
        return LabeledDataset(std::move(docs));
    } catch (const InvalidDataset& e) {
        throw ParseError(e.what());
    }
}

void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("IOError", "cannot write " + path.string());
    out << to_jsonl(ds);
    if (!out) throw Error("IOError", "write failed for " + path.string());
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IOError", "cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return from_jsonl(buf.str());
}

}  // namespace radkd
