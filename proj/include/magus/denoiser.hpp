#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "magus/condition.hpp"
#include "magus/schedule.hpp"

namespace magus {

struct ToyDataset;

/// What the network regresses. Either way predict_noise returns epsilon;
/// velocity outputs are converted with the training schedule's alpha_bar.
enum class Prediction { epsilon, velocity };

struct DenoiserConfig {
    int in_channels = 1;
    int freq_bins = 32;
    int time_frames = 32;
    /// Side of the square patch folded into channels by the input conv.
    int patch = 2;
    std::vector<int> channels{32, 64};
    int heads = 4;
    int attn_dim = 64;
    int time_embed_dim = 64;
    int groups = 8;
    int sentence_dim = 32;
    int sequence_dim = 32;
    int max_length = 16;
    int sequence_tokens = 8;
    Prediction prediction = Prediction::velocity;

    /// One site per encoder stage, one in the bottleneck, one per decoder stage.
    int num_sites() const { return 2 * static_cast<int>(channels.size()) + 1; }
    int condition_tokens() const { return max_length + sequence_tokens; }
    void validate() const;

    static DenoiserConfig for_encoder(const EncoderDims& dims);
    std::string to_json() const;
    static DenoiserConfig from_json(std::string_view json);
};

/// Cross-attention maps of one denoiser call. sites[s] has shape
/// (heads * N_s, L + K): the rows of every head stacked, N_s spatial queries,
/// condition columns ordered [sentence positions ; sequence rows].
struct AttentionMaps {
    std::vector<torch::Tensor> sites;

    std::size_t size() const { return sites.size(); }
    AttentionMaps detached() const;
};

/// Projection set for one attention site. Keys and values use separate
/// matrices for the two condition branches; all matrices act on row vectors.
struct CrossAttentionWeights {
    torch::Tensor query;          // (d, d)
    torch::Tensor key_sentence;   // (D_s, d)
    torch::Tensor key_sequence;   // (D_g, d)
    torch::Tensor value_sentence; // (D_s, d)
    torch::Tensor value_sequence; // (D_g, d)
    int heads = 1;
};

struct CrossAttentionResult {
    torch::Tensor output;  // (N, d)
    torch::Tensor maps;    // (heads * N, L + K)
};

CrossAttentionResult cross_attention(const torch::Tensor& features, const PromptEmbedding& embedding,
                                     const CrossAttentionWeights& weights);

/// Multi-head attention over batched keys. q: (B, N, d), k/v: (B, M, d),
/// key_mask: (B, M) bool. Returns output (B, N, d) and maps (B, heads, N, M).
std::pair<torch::Tensor, torch::Tensor> masked_attention(const torch::Tensor& q, const torch::Tensor& k,
                                                         const torch::Tensor& v, const torch::Tensor& key_mask,
                                                         int heads);

/// Batched conditioning in the model dtype.
struct ConditionBatch {
    torch::Tensor sentence;       // (B, L, D_s)
    torch::Tensor sentence_mask;  // (B, L) bool
    torch::Tensor sequence;       // (B, K, D_g)

    static ConditionBatch from(const std::vector<PromptEmbedding>& embeddings, torch::Dtype dtype);
    int64_t batch() const { return sentence.size(0); }
};

struct NoisePrediction {
    torch::Tensor eps;
    std::optional<AttentionMaps> maps;
};

class UNetImpl;

/// eps_theta(z_t, E, t). Thread-safe for concurrent predictions once weights
/// are fixed.
class Denoiser {
public:
    /// No weights; every prediction raises StateError.
    Denoiser();
    /// Freshly initialized weights drawn from `seed`.
    explicit Denoiser(DenoiserConfig config, std::uint64_t seed = 0);
    ~Denoiser();
    Denoiser(Denoiser&&) noexcept;
    Denoiser& operator=(Denoiser&&) noexcept;

    const DenoiserConfig& config() const { return config_; }
    torch::Dtype dtype() const { return dtype_; }
    /// Casts weights; the gradient checks run in float64.
    void to(torch::Dtype dtype);
    bool loaded() const { return net_ != nullptr; }
    /// alpha_bar table (index t - 1) used to convert velocity outputs.
    void set_schedule(const NoiseSchedule& schedule);

    /// Output has z_t's shape and dtype. With grad mode on and z_t requiring
    /// grad, eps and maps stay attached to the graph.
    NoisePrediction forward(const torch::Tensor& z_t, int t, const PromptEmbedding& embedding, bool capture) const;
    /// Inference entry point: no autograd.
    NoisePrediction predict_noise(const LatentClip& z_t, int t, const PromptEmbedding& embedding,
                                  bool capture = false) const;
    /// Raw batched network output in the model dtype (epsilon or velocity per
    /// config). x: (B, C, F, T), t: (B) int64.
    torch::Tensor forward_batch(const torch::Tensor& x, const torch::Tensor& t, const ConditionBatch& cond,
                                std::vector<torch::Tensor>* maps = nullptr) const;

    std::vector<torch::Tensor> parameters() const;
    std::vector<std::pair<std::string, torch::Tensor>> named_parameters() const;
    void load_parameters(const std::vector<std::pair<std::string, torch::Tensor>>& tensors);
    /// Number of denoiser calls made through forward/predict_noise.
    std::int64_t evaluations() const { return evaluations_ ? evaluations_->load() : 0; }

private:
    void check_input(const torch::Tensor& z_t, int t) const;

    DenoiserConfig config_;
    torch::Dtype dtype_ = torch::kFloat32;
    std::shared_ptr<UNetImpl> net_;
    std::vector<double> alpha_bars_;
    std::shared_ptr<std::atomic<std::int64_t>> evaluations_;
};

struct TrainOptions {
    int epochs = 48;
    int batch_size = 32;
    double learning_rate = 2e-3;
    /// Fraction of the run spent warming up before cosine decay.
    double warmup_fraction = 0.05;
    double p_uncond = 0.1;
    double ema_decay = 0.999;
    std::uint64_t seed = 0;
    int threads = 0;
    /// Called after every epoch with (epoch, mean loss).
    std::function<void(int, double)> on_epoch;
};

struct TrainResult {
    std::shared_ptr<Denoiser> model;
    std::vector<double> epoch_loss;
    int steps = 0;
};

TrainResult train_toy_denoiser(const ToyDataset& dataset, const NoiseSchedule& schedule, const TextEncoder& encoder,
                               const DenoiserConfig& config, const TrainOptions& options);

/// Everything needed to rebuild a trained toy pipeline.
struct ModelBundle {
    std::shared_ptr<Denoiser> denoiser;
    ToyEncoderConfig encoder;
    ScheduleOptions schedule;
    /// Sampling clamp for x_0 estimates, when the data range is known.
    std::optional<std::pair<double, double>> x0_range;
};

void save_model(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_model(const std::filesystem::path& path);

std::string schedule_options_to_json(const ScheduleOptions& options);
ScheduleOptions schedule_options_from_json(std::string_view json);

}  // namespace magus
