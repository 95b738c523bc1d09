#pragma once

#include <chrono>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/types.h>

#include "magus/condition.hpp"
#include "magus/denoiser.hpp"
#include "magus/editor.hpp"
#include "magus/schedule.hpp"

namespace magus {

struct InversionConfig {
    int num_inference_steps = 100;
    double guidance_scale = 1.0;
    /// 0 disables the regularizer.
    double autocorr_weight = 0.0;
    int autocorr_iters = 0;
    double autocorr_step = 1e-2;
    /// Corrections per step towards z_t with ddim_step(z_t) == z_{t_prev}: a
    /// fixed-point pass re-evaluating eps at the current estimate, or a
    /// Newton-Krylov step once the fixed point stalls (as it does on the step
    /// out of t = 0). 0 is plain DDIM inversion.
    int refine_iters = 0;

    void validate() const;
};

struct InversionTrace {
    std::vector<int> timesteps;
    std::vector<double> norms;
    /// eps used for each inversion step, in inversion order.
    std::vector<torch::Tensor> eps;
    bool high_guidance = false;
};

struct InversionResult {
    LatentClip z_T;
    InversionTrace trace;
};

/// Estimates z_T for a clean latent by running DDIM backwards from t = 0.
InversionResult invert(const LatentClip& z0, std::span<const std::string> caption, const InversionConfig& config,
                       const Denoiser& denoiser, const NoiseSchedule& schedule, const TextEncoder& encoder);

/// Replays recorded eps values forward (eta = 0), the exact inverse of `invert`
/// without regularization.
LatentClip replay_inversion(const LatentClip& z_T, const InversionTrace& trace, const NoiseSchedule& schedule);

/// R(z) = sum over lags {1,2,4,8} on both spatial axes of the squared
/// normalized circular autocorrelation, plus mean^2 and (var - 1)^2.
torch::Tensor autocorr_penalty(const torch::Tensor& z);

/// autocorr_iters gradient steps on autocorr_weight * R. The step is scaled by
/// the element count so it does not shrink with the latent size.
LatentClip autocorr_regularize(const LatentClip& z, const InversionConfig& config);

/// Clip in, caption out. External captioning services implement this.
class Captioner {
public:
    virtual ~Captioner() = default;
    virtual std::string caption(const LatentClip& clip) const = 0;
};

/// Runs `command <clip.f32t>` and reads one caption line from stdout.
class CommandCaptioner final : public Captioner {
public:
    CommandCaptioner(std::string command, std::chrono::seconds timeout) : command_(std::move(command)), timeout_(timeout) {}
    std::string caption(const LatentClip& clip) const override;

private:
    std::string command_;
    std::chrono::seconds timeout_;
};

std::vector<std::string> caption_for_clip(const LatentClip& clip, const Captioner* captioner);

struct RealEditRequest {
    std::string source_keyword;
    std::string target_keyword;
    std::optional<EditDirection> direction;
    bool use_delta = true;
    EditOptions edit;
    InversionConfig inversion;
    std::optional<std::pair<double, double>> x0_range;
};

struct RealEditResult {
    std::string caption;
    std::string target_prompt;
    LatentClip z_T;
    LatentClip reconstruction;
    LatentClip edited;
    std::vector<StepRecord> steps;
    InversionTrace trace;
};

/// caption -> invert -> reconstruct and record from z_T -> constrained edit.
RealEditResult edit_real(const LatentClip& clip, const RealEditRequest& request, const Denoiser& denoiser,
                         const NoiseSchedule& schedule, const TextEncoder& encoder, const Captioner* captioner);

}  // namespace magus
