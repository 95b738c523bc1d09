#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/types.h>

#include "magus/condition.hpp"
#include "magus/denoiser.hpp"
#include "magus/schedule.hpp"

namespace magus {

/// Maps recorded at every inference timestep of a reconstruction.
struct AttentionTrajectory {
    std::vector<int> timesteps;
    std::vector<AttentionMaps> steps;

    std::size_t size() const { return steps.size(); }
    /// Tensor container with entries "step<i>/site<s>" and the timesteps in the header.
    void save(const std::filesystem::path& path) const;
    static AttentionTrajectory load(const std::filesystem::path& path);
};

/// How per-site differences combine into one loss.
///   stacked:    sqrt(sum_s ||M_s - O_s||_F^2), the norm of all sites stacked
///   site_mean:  sqrt(mean_s ||M_s - O_s||_F^2)
enum class LossReduction { stacked, site_mean };

struct LossOptions {
    LossReduction reduction = LossReduction::stacked;
    /// Sites that contribute; empty means all.
    std::vector<bool> sites;
};

double attention_loss(const AttentionMaps& edit, const AttentionMaps& origin, const LossOptions& options = {});
/// Differentiable form; `edit` may carry autograd history.
torch::Tensor attention_loss_tensor(const AttentionMaps& edit, const AttentionMaps& origin,
                                    const LossOptions& options = {});

struct LossGradient {
    double loss = 0.0;
    /// d loss / d z_t, zero when the loss is exactly zero.
    torch::Tensor grad;
};

/// One conditional pass at z_t under E_edit, compared against M_origin_t.
LossGradient attention_loss_gradient(const Denoiser& denoiser, const torch::Tensor& z_t, int t,
                                     const PromptEmbedding& edit_embedding, const AttentionMaps& origin,
                                     const LossOptions& options = {});

torch::Tensor cfg_combine(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double w);

struct EditOptions {
    double alpha = 0.04;
    double guidance_scale = 1.0;
    bool constraint_enabled = true;
    LossOptions loss;
};

/// Shared context of one sampling chain.
struct SamplingContext {
    const Denoiser& denoiser;
    const NoiseSchedule& schedule;
    /// Required when guidance_scale != 1.
    const PromptEmbedding* unconditional = nullptr;
    /// When set, the x_0 implied by each noise prediction is clamped to this
    /// range and epsilon is recomputed from the clamped value.
    std::optional<std::pair<double, double>> x0_range;
};

/// epsilon consistent with z_t and the clamped x_0 estimate.
torch::Tensor clamp_prediction(const torch::Tensor& z_t, const torch::Tensor& eps, int t, const NoiseSchedule& schedule,
                               std::pair<double, double> x0_range);

struct Reconstruction {
    LatentClip z0;
    AttentionTrajectory origin;
    /// z at every inference timestep followed by z_0.
    std::vector<torch::Tensor> latents;
};

Reconstruction reconstruct_and_record(const LatentClip& z_T, const PromptEmbedding& embedding,
                                      const SamplingContext& ctx, double guidance_scale = 1.0);

struct StepRecord {
    int t = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct StepResult {
    LatentClip z_prev;
    StepRecord record;
};

StepResult constrained_edit_step(const LatentClip& z_t, const PromptEmbedding& edit_embedding,
                                 const AttentionMaps& origin_t, int t, int t_prev, const SamplingContext& ctx,
                                 const EditOptions& options);

struct EditOutcome {
    LatentClip original;
    LatentClip edited;
    AttentionTrajectory origin;
    std::vector<torch::Tensor> edited_latents;
    std::vector<StepRecord> steps;
    std::int64_t reconstruction_evaluations = 0;
    std::int64_t edit_evaluations = 0;
};

/// Edited chain from z_T under E_edit, constrained towards an existing reconstruction.
EditOutcome edit_with_origin(const LatentClip& z_T, const Reconstruction& reconstruction,
                             const PromptEmbedding& embedding, const PromptEmbedding& edit_embedding,
                             const SamplingContext& ctx, const EditOptions& options);

/// Reconstruct from z_T under E, then run the edited chain under E_edit from the same z_T.
EditOutcome edit_latent(const LatentClip& z_T, const PromptEmbedding& embedding, const PromptEmbedding& edit_embedding,
                        const SamplingContext& ctx, const EditOptions& options);

struct EditRequest {
    std::string source_prompt;
    std::string target_prompt;
    std::optional<EditDirection> direction;
    /// false: condition the edited pass on the raw target embedding.
    bool use_delta = true;
    double alpha = 0.04;
    double guidance_scale = 1.0;
    std::uint64_t seed = 0;
    int num_inference_steps = 100;
    bool constraint_enabled = true;
    LossOptions loss;
    std::optional<std::pair<double, double>> x0_range;
};

struct EditResult {
    LatentClip original;
    LatentClip edited;
    std::vector<StepRecord> steps;
    /// JSON document, schema "magus.edit_report" version 1.
    std::string report;
};

/// Edited embedding for a request: E + delta with the target's sequence
/// branch, or the raw target embedding when use_delta is off.
PromptEmbedding edited_embedding(const EditRequest& request, const PromptEmbedding& source,
                                 const PromptEmbedding& target);

/// Initial noise of shape (C, F, T) in float64 drawn from `seed`.
torch::Tensor initial_noise(const DenoiserConfig& config, std::uint64_t seed);

EditResult edit(const EditRequest& request, const Denoiser& denoiser, const NoiseSchedule& schedule,
                const TextEncoder& encoder);

std::string edit_report_json(const EditRequest& request, const EditOutcome& outcome, const DenoiserConfig& config);

}  // namespace magus
