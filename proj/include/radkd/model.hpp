#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace radkd {

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;

    Vocabulary();
    /// Sorted token order after PAD/UNK, so identical corpora give identical ids.
    static Vocabulary build(std::span<const std::string> texts);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    int id(std::string_view token) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

/// Lowercase, drop punctuation, split on whitespace.
std::vector<std::string> student_words(std::string_view text);

struct TokenSeq {
    std::vector<int> ids;      // padded to the model's max length
    std::size_t length = 0;    // real tokens before padding
    bool empty() const { return length == 0; }
};

enum class EncoderKind : std::uint8_t { Attention, MeanPool };

struct ModelConfig {
    EncoderKind encoder = EncoderKind::Attention;
    std::size_t embed_dim = 64;   // d
    std::size_t latent_dim = 64;  // h
    std::size_t ff_dim = 128;
    std::size_t num_classes = 3;  // K
    std::size_t max_len = 64;
    std::uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;
};

std::string_view to_string(EncoderKind k);
std::optional<EncoderKind> parse_encoder(std::string_view s);

struct ForwardResult {
    Eigen::VectorXd latent;  // z, the vector the contrastive loss consumes
    Eigen::VectorXd logits;
    Eigen::VectorXd probs;
};

/// Intermediate values kept by a forward pass for the backward pass.
struct ForwardTrace {
    std::vector<int> ids;  // real tokens (a single PAD when the input is empty)
    Eigen::MatrixXd x, q, k, v, attn, ctx, h1, pre_ff, ff, h2;
    Eigen::VectorXd pooled, latent, logits, probs;
};

/// The student encoder: embedding, optional single self-attention block with
/// a residual feed-forward, mean pooling, tanh projection to the latent and a
/// linear classification head.
///
/// All parameters live in one flat buffer so optimisation, finite-difference
/// checks and checkpointing treat them uniformly.
class StudentModel {
public:
    struct Block {
        std::string name;
        std::size_t offset, rows, cols;
    };

    StudentModel(ModelConfig cfg, Vocabulary vocab);

    const ModelConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return vocab_; }
    const std::vector<Block>& layout() const { return layout_; }

    std::span<double> params() { return theta_; }
    std::span<const double> params() const { return theta_; }
    std::size_t param_count() const { return theta_.size(); }

    /// Rounds every parameter to float32 so checkpoints reproduce it exactly.
    void snap_to_storage_precision();

    TokenSeq tokenize(std::string_view text) const;

    /// Throws InvalidToken for ids outside the vocabulary.
    ForwardResult forward(const TokenSeq& seq) const;
    ForwardResult forward(std::string_view text) const { return forward(tokenize(text)); }

    void forward_trace(const TokenSeq& seq, ForwardTrace& tr) const;
    /// Accumulates d(loss)/d(theta) into `grad` given the loss gradients with
    /// respect to the latent and the logits of the traced example.
    void backward(const ForwardTrace& tr, const Eigen::VectorXd& grad_latent,
                  const Eigen::VectorXd& grad_logits, std::span<double> grad) const;

private:
    using MapM = Eigen::Map<Eigen::MatrixXd>;
    using CMapM = Eigen::Map<const Eigen::MatrixXd>;

    CMapM view(std::size_t block) const;
    static MapM view(const Block& b, std::span<double> buf);

    void init_params();

    ModelConfig cfg_;
    Vocabulary vocab_;
    std::vector<Block> layout_;
    std::vector<double> theta_;
};

struct TrainingMeta {
    std::string level;  // "document" | "sentence"
    double lambda = 1.0;
    double tau = 0.1;
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
    double loss = 0.0;

    bool operator==(const TrainingMeta&) const = default;
};

struct Checkpoint {
    StudentModel model;
    TrainingMeta meta;
};

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const StudentModel& model, const TrainingMeta& meta,
                     const std::filesystem::path& path);
std::string checkpoint_bytes(const StudentModel& model, const TrainingMeta& meta);

/// Throws ParseError on a damaged file, UnsupportedCheckpoint on a version
/// mismatch and ConfigError when `expected_classes` disagrees with the head.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::size_t> expected_classes = std::nullopt);
Checkpoint parse_checkpoint(std::string_view bytes,
                            std::optional<std::size_t> expected_classes = std::nullopt);

}  // namespace radkd
