#include "radkd/model.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "radkd/error.hpp"
#include "radkd/random.hpp"

namespace radkd {

// ---------------------------------------------------------------------------
// Vocabulary and tokenisation

Vocabulary::Vocabulary() : tokens_{"<pad>", "<unk>"}, index_{{"<pad>", kPad}, {"<unk>", kUnk}} {}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>") {
        throw ConfigError("vocabulary must start with <pad>, <unk>");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.index_.clear();
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
            throw ConfigError("duplicate vocabulary token '" + v.tokens_[i] + "'");
        }
    }
    return v;
}

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
    std::set<std::string> words;
    for (const auto& t : texts) {
        for (auto& w : student_words(t)) words.insert(std::move(w));
    }
    words.erase("<pad>");
    words.erase("<unk>");
    std::vector<std::string> tokens = {"<pad>", "<unk>"};
    tokens.insert(tokens.end(), words.begin(), words.end());
    return from_tokens(std::move(tokens));
}

int Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

std::vector<std::string> student_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isspace(uc)) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else if (!std::ispunct(uc)) {
            cur += static_cast<char>(std::tolower(uc));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::string_view to_string(EncoderKind k) {
    return k == EncoderKind::Attention ? "attention" : "meanpool";
}

std::optional<EncoderKind> parse_encoder(std::string_view s) {
    if (s == "attention") return EncoderKind::Attention;
    if (s == "meanpool") return EncoderKind::MeanPool;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

enum BlockId : std::size_t { kEmb, kWq, kWk, kWv, kWo, kW1, kB1, kW2, kB2, kWz, kBz, kWc, kBc, kNumBlocks };

}  // namespace

StudentModel::StudentModel(ModelConfig cfg, Vocabulary vocab)
    : cfg_(cfg), vocab_(std::move(vocab)) {
    if (cfg_.embed_dim == 0 || cfg_.latent_dim == 0 || cfg_.num_classes < 2 || cfg_.max_len == 0 ||
        (cfg_.encoder == EncoderKind::Attention && cfg_.ff_dim == 0)) {
        throw ConfigError("invalid model dimensions");
    }
    const std::size_t d = cfg_.embed_dim, h = cfg_.latent_dim, f = cfg_.ff_dim,
                      k = cfg_.num_classes, v = vocab_.size();
    const bool attn = cfg_.encoder == EncoderKind::Attention;
    const std::pair<const char*, std::pair<std::size_t, std::size_t>> shapes[kNumBlocks] = {
        {"embedding", {v, d}},
        {"attn_q", {attn ? d : 0, d}},
        {"attn_k", {attn ? d : 0, d}},
        {"attn_v", {attn ? d : 0, d}},
        {"attn_out", {attn ? d : 0, d}},
        {"ff_in", {attn ? d : 0, f}},
        {"ff_in_bias", {attn ? f : 0, 1}},
        {"ff_out", {attn ? f : 0, d}},
        {"ff_out_bias", {attn ? d : 0, 1}},
        {"latent", {d, h}},
        {"latent_bias", {h, 1}},
        {"head", {h, k}},
        {"head_bias", {k, 1}},
    };
    std::size_t off = 0;
    for (const auto& [name, rc] : shapes) {
        layout_.push_back({name, off, rc.first, rc.second});
        off += rc.first * rc.second;
    }
    theta_.assign(off, 0.0);
    init_params();
}

StudentModel::CMapM StudentModel::view(std::size_t block) const {
    const auto& b = layout_[block];
    return CMapM(theta_.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                 static_cast<Eigen::Index>(b.cols));
}

StudentModel::MapM StudentModel::view(const Block& b, std::span<double> buf) {
    return MapM(buf.data() + b.offset, static_cast<Eigen::Index>(b.rows),
                static_cast<Eigen::Index>(b.cols));
}

void StudentModel::init_params() {
    Rng rng(cfg_.seed ^ 0x5eedULL);
    auto fill = [&](std::size_t block, double stddev) {
        const auto& b = layout_[block];
        for (std::size_t i = 0; i < b.rows * b.cols; ++i) {
            theta_[b.offset + i] = stddev * rng.normal();
        }
    };
    const double d = static_cast<double>(cfg_.embed_dim);
    const double h = static_cast<double>(cfg_.latent_dim);
    const double f = static_cast<double>(cfg_.ff_dim);
    fill(kEmb, 1.0);
    fill(kWq, 1.0 / std::sqrt(d));
    fill(kWk, 1.0 / std::sqrt(d));
    fill(kWv, 1.0 / std::sqrt(d));
    fill(kWo, 0.5 / std::sqrt(d));
    fill(kW1, std::sqrt(2.0 / d));
    fill(kW2, 0.5 / std::sqrt(f));
    fill(kWz, 1.0 / std::sqrt(d));
    // Small head so a fresh model starts close to the uniform distribution.
    fill(kWc, 0.1 / std::sqrt(h));
    snap_to_storage_precision();
}

void StudentModel::snap_to_storage_precision() {
    for (auto& t : theta_) t = static_cast<double>(static_cast<float>(t));
}

TokenSeq StudentModel::tokenize(std::string_view text) const {
    TokenSeq seq;
    seq.ids.assign(cfg_.max_len, Vocabulary::kPad);
    for (const auto& w : student_words(text)) {
        if (seq.length == cfg_.max_len) break;
        seq.ids[seq.length++] = vocab_.id(w);
    }
    return seq;
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

void row_softmax(Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
    }
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    const double mx = logits.maxCoeff();
    Eigen::VectorXd e = (logits.array() - mx).exp();
    return e / e.sum();
}

}  // namespace

void StudentModel::forward_trace(const TokenSeq& seq, ForwardTrace& tr) const {
    tr.ids.assign(seq.ids.begin(), seq.ids.begin() + static_cast<std::ptrdiff_t>(seq.length));
    if (tr.ids.empty()) tr.ids.push_back(Vocabulary::kPad);
    for (int id : tr.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
            throw InvalidToken("token id " + std::to_string(id) + " outside vocabulary of size " +
                               std::to_string(vocab_.size()));
        }
    }
    const auto n = static_cast<Eigen::Index>(tr.ids.size());
    const auto emb = view(kEmb);
    tr.x.resize(n, emb.cols());
    for (Eigen::Index t = 0; t < n; ++t) tr.x.row(t) = emb.row(tr.ids[static_cast<std::size_t>(t)]);

    const Eigen::MatrixXd* top = &tr.x;
    if (cfg_.encoder == EncoderKind::Attention) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim));
        tr.q.noalias() = tr.x * view(kWq);
        tr.k.noalias() = tr.x * view(kWk);
        tr.v.noalias() = tr.x * view(kWv);
        tr.attn.noalias() = (tr.q * tr.k.transpose()) * scale;
        row_softmax(tr.attn);
        tr.ctx.noalias() = tr.attn * tr.v;
        tr.h1 = tr.x;
        tr.h1.noalias() += tr.ctx * view(kWo);
        tr.pre_ff.noalias() = tr.h1 * view(kW1);
        tr.pre_ff.rowwise() += view(kB1).col(0).transpose();
        tr.ff = tr.pre_ff.cwiseMax(0.0);
        tr.h2 = tr.h1;
        tr.h2.noalias() += tr.ff * view(kW2);
        tr.h2.rowwise() += view(kB2).col(0).transpose();
        top = &tr.h2;
    }
    tr.pooled = top->colwise().mean().transpose();
    tr.latent = (view(kWz).transpose() * tr.pooled + view(kBz).col(0)).array().tanh();
    tr.logits = view(kWc).transpose() * tr.latent + view(kBc).col(0);
    tr.probs = softmax(tr.logits);
}

ForwardResult StudentModel::forward(const TokenSeq& seq) const {
    ForwardTrace tr;
    forward_trace(seq, tr);
    return {std::move(tr.latent), std::move(tr.logits), std::move(tr.probs)};
}

void StudentModel::backward(const ForwardTrace& tr, const Eigen::VectorXd& grad_latent,
                            const Eigen::VectorXd& grad_logits, std::span<double> grad) const {
    auto g = [&](std::size_t block) { return view(layout_[block], grad); };

    g(kWc).noalias() += tr.latent * grad_logits.transpose();
    g(kBc).col(0) += grad_logits;
    const Eigen::VectorXd g_latent = grad_latent + view(kWc) * grad_logits;
    const Eigen::VectorXd g_pre = g_latent.array() * (1.0 - tr.latent.array().square());
    g(kWz).noalias() += tr.pooled * g_pre.transpose();
    g(kBz).col(0) += g_pre;
    const Eigen::VectorXd g_pooled = view(kWz) * g_pre;

    const auto n = static_cast<Eigen::Index>(tr.ids.size());
    // Mean pooling spreads the pooled gradient evenly over positions.
    Eigen::MatrixXd g_top = (g_pooled / static_cast<double>(n)).transpose().replicate(n, 1);

    Eigen::MatrixXd g_x;
    if (cfg_.encoder == EncoderKind::Attention) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.embed_dim));
        const Eigen::MatrixXd& g_h2 = g_top;
        g(kW2).noalias() += tr.ff.transpose() * g_h2;
        g(kB2).col(0) += g_h2.colwise().sum().transpose();
        Eigen::MatrixXd g_ff = g_h2 * view(kW2).transpose();
        g_ff = g_ff.cwiseProduct((tr.pre_ff.array() > 0.0).cast<double>().matrix());
        g(kW1).noalias() += tr.h1.transpose() * g_ff;
        g(kB1).col(0) += g_ff.colwise().sum().transpose();
        Eigen::MatrixXd g_h1 = g_h2;
        g_h1.noalias() += g_ff * view(kW1).transpose();

        g(kWo).noalias() += tr.ctx.transpose() * g_h1;
        const Eigen::MatrixXd g_ctx = g_h1 * view(kWo).transpose();
        const Eigen::MatrixXd g_attn = g_ctx * tr.v.transpose();
        const Eigen::MatrixXd g_v = tr.attn.transpose() * g_ctx;
        Eigen::MatrixXd g_scores =
            tr.attn.cwiseProduct((g_attn.colwise() -
                                  g_attn.cwiseProduct(tr.attn).rowwise().sum()));
        g_scores *= scale;
        const Eigen::MatrixXd g_q = g_scores * tr.k;
        const Eigen::MatrixXd g_k = g_scores.transpose() * tr.q;

        g(kWq).noalias() += tr.x.transpose() * g_q;
        g(kWk).noalias() += tr.x.transpose() * g_k;
        g(kWv).noalias() += tr.x.transpose() * g_v;
        g_x = g_h1;
        g_x.noalias() += g_q * view(kWq).transpose();
        g_x.noalias() += g_k * view(kWk).transpose();
        g_x.noalias() += g_v * view(kWv).transpose();
    } else {
        g_x = std::move(g_top);
    }

    auto g_emb = g(kEmb);
    for (Eigen::Index t = 0; t < n; ++t) g_emb.row(tr.ids[static_cast<std::size_t>(t)]) += g_x.row(t);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

using json = nlohmann::ordered_json;
constexpr std::string_view kFormat = "radkd-checkpoint";

json config_json(const ModelConfig& c) {
    return json{{"encoder", to_string(c.encoder)}, {"embed_dim", c.embed_dim},
                {"latent_dim", c.latent_dim},      {"ff_dim", c.ff_dim},
                {"num_classes", c.num_classes},    {"max_len", c.max_len},
                {"seed", c.seed}};
}

}  // namespace

std::string checkpoint_bytes(const StudentModel& model, const TrainingMeta& meta) {
    json shapes = json::array();
    for (const auto& b : model.layout()) {
        shapes.push_back(json{{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}});
    }
    const json header{
        {"format", kFormat},
        {"version", kCheckpointVersion},
        {"config", config_json(model.config())},
        {"shapes", shapes},
        {"param_count", model.param_count()},
        {"training",
         {{"level", meta.level},
          {"lambda", meta.lambda},
          {"tau", meta.tau},
          {"seed", meta.seed},
          {"epoch", meta.epoch},
          {"loss", meta.loss}}},
        {"vocabulary", model.vocab().tokens()},
    };
    std::string out = header.dump();
    out += '\n';
    const auto params = model.params();
    out.reserve(out.size() + params.size() * 4);
    for (double p : params) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(p));
        for (int s = 0; s < 32; s += 8) out += static_cast<char>((bits >> s) & 0xffu);
    }
    return out;
}

void save_checkpoint(const StudentModel& model, const TrainingMeta& meta,
                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("IOError", "cannot write " + path.string());
    out << checkpoint_bytes(model, meta);
    if (!out) throw Error("IOError", "write failed for " + path.string());
}

Checkpoint parse_checkpoint(std::string_view bytes, std::optional<std::size_t> expected_classes) {
    const std::size_t nl = bytes.find('\n');
    if (nl == std::string_view::npos) throw ParseError("checkpoint header not terminated");
    json header;
    try {
        header = json::parse(bytes.substr(0, nl));
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what(), 1);
    }
    try {
        if (header.at("format").get<std::string>() != kFormat) {
            throw ParseError("not a checkpoint file", 1);
        }
        const int version = header.at("version").get<int>();
        if (version != kCheckpointVersion) {
            throw UnsupportedCheckpoint("checkpoint version " + std::to_string(version) +
                                        ", expected " + std::to_string(kCheckpointVersion));
        }
        const auto& c = header.at("config");
        ModelConfig cfg;
        auto enc = parse_encoder(c.at("encoder").get<std::string>());
        if (!enc) throw ParseError("unknown encoder", 1);
        cfg.encoder = *enc;
        cfg.embed_dim = c.at("embed_dim").get<std::size_t>();
        cfg.latent_dim = c.at("latent_dim").get<std::size_t>();
        cfg.ff_dim = c.at("ff_dim").get<std::size_t>();
        cfg.num_classes = c.at("num_classes").get<std::size_t>();
        cfg.max_len = c.at("max_len").get<std::size_t>();
        cfg.seed = c.at("seed").get<std::uint64_t>();
        if (expected_classes && *expected_classes != cfg.num_classes) {
            throw ConfigError("checkpoint has " + std::to_string(cfg.num_classes) +
                              " classes, task needs " + std::to_string(*expected_classes));
        }

        StudentModel model(cfg, Vocabulary::from_tokens(
                                    header.at("vocabulary").get<std::vector<std::string>>()));
        const auto count = header.at("param_count").get<std::size_t>();
        if (count != model.param_count()) throw ParseError("parameter count mismatch", 1);
        const auto& shapes = header.at("shapes");
        if (shapes.size() != model.layout().size()) throw ParseError("shape table mismatch", 1);
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            const auto& b = model.layout()[i];
            if (shapes[i].at("name").get<std::string>() != b.name ||
                shapes[i].at("rows").get<std::size_t>() != b.rows ||
                shapes[i].at("cols").get<std::size_t>() != b.cols) {
                throw ParseError("shape mismatch for block " + b.name, 1);
            }
        }
        const std::string_view payload = bytes.substr(nl + 1);
        if (payload.size() != count * 4) {
            throw ParseError("payload has " + std::to_string(payload.size()) + " bytes, expected " +
                             std::to_string(count * 4));
        }
        auto params = model.params();
        for (std::size_t i = 0; i < count; ++i) {
            std::uint32_t bits = 0;
            for (int s = 0; s < 4; ++s) {
                bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[i * 4 + s]))
                        << (8 * s);
            }
            const float f = std::bit_cast<float>(bits);
            if (!std::isfinite(f)) throw ParseError("non-finite parameter");
            params[i] = static_cast<double>(f);
        }

        const auto& t = header.at("training");
        TrainingMeta meta;
        meta.level = t.at("level").get<std::string>();
        meta.lambda = t.at("lambda").get<double>();
        meta.tau = t.at("tau").get<double>();
        meta.seed = t.at("seed").get<std::uint64_t>();
        meta.epoch = t.at("epoch").get<std::size_t>();
        meta.loss = t.at("loss").get<double>();
        return {std::move(model), std::move(meta)};
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what(), 1);
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_classes) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IOError", "cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_checkpoint(buf.str(), expected_classes);
}

}  // namespace radkd
