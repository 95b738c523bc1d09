#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/types.h>

namespace magus {

/// Two-branch prompt conditioning. All tensors are float64.
///   sentence    (L, D_s)   per-token sentence-level branch, padded to L
///   sequence    (K, D_g)   fine-grained generated tokens
///   pooled      (D_c)      global text vector feeding the sequence branch
///   valid_mask  (L) bool   true on non-padding positions
struct PromptEmbedding {
    torch::Tensor sentence;
    torch::Tensor sequence;
    torch::Tensor pooled;
    torch::Tensor valid_mask;

    int64_t max_length() const { return sentence.size(0); }
    int64_t sentence_dim() const { return sentence.size(1); }
    int64_t sequence_tokens() const { return sequence.size(0); }
    int64_t sequence_dim() const { return sequence.size(1); }
    int64_t num_valid() const;

    bool equals(const PromptEmbedding& other) const;
};

struct EncoderDims {
    int max_length = 16;
    int sentence_dim = 32;
    int sequence_tokens = 8;
    int sequence_dim = 32;
    int pooled_dim = 16;
};

/// Lower-cases, drops punctuation, splits on whitespace.
std::vector<std::string> tokenize(std::string_view text);

class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual EncoderDims dims() const = 0;
    virtual bool knows(const std::string& token) const = 0;
    virtual PromptEmbedding encode(std::span<const std::string> tokens) const = 0;
};

struct ToyEncoderConfig {
    std::vector<std::string> vocabulary;
    EncoderDims dims;
    /// Weight of a token's own embedding at its position; the remainder is the
    /// sentence mean, which makes every position carry sentence context.
    double token_weight = 0.25;
    double position_scale = 0.1;
    std::uint64_t seed = 1234;

    /// Vocabulary covering the default caption bank and toy attribute space.
    static ToyEncoderConfig defaults();
    std::string to_json() const;
    static ToyEncoderConfig from_json(std::string_view json);
};

/// Deterministic stand-in for a pretrained two-branch text encoder.
///   sentence[i] = w * (tok_i + pos_i) + (1 - w) * mean_j(tok_j + pos_j)
///   pooled      = W_pool * mean_valid(sentence)
///   sequence    = softmax(Q P^T / sqrt(D_g)) P,  P = [W_proj sentence_valid ; W_pool_proj pooled]
class ToyTextEncoder final : public TextEncoder {
public:
    explicit ToyTextEncoder(ToyEncoderConfig config);

    EncoderDims dims() const override { return config_.dims; }
    bool knows(const std::string& token) const override;
    PromptEmbedding encode(std::span<const std::string> tokens) const override;

    const ToyEncoderConfig& config() const { return config_; }
    /// Raw embedding row of a vocabulary token.
    torch::Tensor token_embedding(const std::string& token) const;
    torch::Tensor position_embedding() const { return positions_; }

private:
    int64_t index_of(const std::string& token) const;

    ToyEncoderConfig config_;
    torch::Tensor table_;
    torch::Tensor positions_;
    torch::Tensor pool_proj_;
    torch::Tensor seq_proj_;
    torch::Tensor seq_pool_proj_;
    torch::Tensor seq_queries_;
};

PromptEmbedding embed_prompt(std::span<const std::string> tokens, const TextEncoder& encoder);
PromptEmbedding embed_prompt(std::string_view text, const TextEncoder& encoder);

/// Mean of the sentence branch over valid positions (zeros when none are valid).
torch::Tensor pooled_sentence(const PromptEmbedding& embedding);

struct EditDirection {
    torch::Tensor delta;
    std::string source_keyword;
    std::string target_keyword;
    int num_captions = 0;

    std::string to_json() const;
};

/// Caption templates with exactly one `{KEY}` slot. Other slots
/// (`{mood}`, `{genre}`, `{timbre}`) are filled from the vocabularies.
///
/// File schema (JSON object):
///   { "templates": [string], "moods": [string], "genres": [string], "timbres": [string] }
struct CaptionBank {
    std::vector<std::string> templates;
    std::vector<std::string> moods;
    std::vector<std::string> genres;
    std::vector<std::string> timbres;

    static CaptionBank defaults();
    static CaptionBank load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    void validate() const;

    /// Vocabulary that contains `word`, if any (category name: mood/genre/timbre).
    std::optional<std::string> category_of(std::string_view word) const;
    std::string to_json() const;
};

std::vector<std::string> synthesize_captions(const std::string& keyword, const CaptionBank& bank, int n,
                                             std::uint64_t seed);

/// Source of caption sets; external LLM adapters implement the same contract.
class CaptionSource {
public:
    virtual ~CaptionSource() = default;
    virtual std::vector<std::string> captions(const std::string& keyword, int n, std::uint64_t seed) const = 0;
};

class BankCaptionSource final : public CaptionSource {
public:
    explicit BankCaptionSource(CaptionBank bank) : bank_(std::move(bank)) {}
    std::vector<std::string> captions(const std::string& keyword, int n, std::uint64_t seed) const override {
        return synthesize_captions(keyword, bank_, n, seed);
    }

private:
    CaptionBank bank_;
};

/// Mean-pool each caption over valid positions, average per set, subtract.
EditDirection compute_delta(std::span<const std::string> captions_src, std::span<const std::string> captions_tgt,
                            const TextEncoder& encoder);

/// sentence: E.sentence + delta on valid positions (or on `position_mask` when
/// given); sequence: taken from `target`; mask and lengths preserved.
PromptEmbedding apply_edit(const PromptEmbedding& embedding, const EditDirection& direction,
                           const PromptEmbedding& target, const torch::Tensor& position_mask = {});

/// Writes one caption per line.
void export_captions(const std::filesystem::path& path, std::span<const std::string> captions);

/// Replaces the first occurrence of `from` (case-insensitive, whole word) in `prompt`.
std::string swap_keyword(std::string_view prompt, std::string_view from, std::string_view to);

}  // namespace magus
