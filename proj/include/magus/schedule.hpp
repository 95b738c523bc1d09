#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <torch/types.h>

namespace magus {

/// A latent (or spectrogram) tensor of shape (channels, freq_bins, time_frames)
/// with audio metadata. Sampling kernels preserve the shape and dtype.
struct LatentClip {
    torch::Tensor data;
    double sample_rate = 16000.0;
    double duration = 5.0;

    LatentClip() = default;
    explicit LatentClip(torch::Tensor tensor, double sample_rate_hz = 16000.0, double duration_s = 5.0);

    int64_t channels() const { return data.size(0); }
    int64_t freq_bins() const { return data.size(1); }
    int64_t time_frames() const { return data.size(2); }

    /// Same metadata, new tensor.
    LatentClip with_data(torch::Tensor tensor) const;
    bool all_finite() const;
};

enum class BetaSpacing { linear, scaled_linear };

struct ScheduleOptions {
    int num_train_steps = 1000;
    double beta_min = 1e-4;
    double beta_max = 0.02;
    BetaSpacing spacing = BetaSpacing::linear;
    int num_inference_steps = 100;
    /// Scales the DDPM posterior standard deviation; 0 gives sigma_t = 0.
    double eta = 1.0;
};

/// Per-step coefficients of the diffusion chain. Timesteps are 1-based
/// (1..T) and alpha_bar(0) == 1 by convention.
class NoiseSchedule {
public:
    /// Builds a schedule from explicit per-step alphas (alpha_1..alpha_T).
    /// sigmas defaults to zero; inference timesteps default to T..1.
    static NoiseSchedule from_alphas(std::vector<double> alphas, std::vector<double> sigmas = {},
                                     std::vector<int> inference_timesteps = {});

    int num_train_steps() const { return static_cast<int>(alphas_.size()); }
    double alpha(int t) const;
    double alpha_bar(int t) const;
    double beta(int t) const { return 1.0 - alpha(t); }
    double sigma(int t) const;

    std::span<const double> alphas() const { return alphas_; }
    std::span<const double> alpha_bars() const { return alpha_bars_; }
    std::span<const double> sigmas() const { return sigmas_; }
    std::span<const int> inference_timesteps() const { return timesteps_; }
    int num_inference_steps() const { return static_cast<int>(timesteps_.size()); }

    /// Timestep that follows inference_timesteps()[index]; 0 after the last.
    int previous_timestep(int index) const;

    /// Same chain, evenly re-spaced inference timesteps.
    NoiseSchedule with_inference_steps(int num_inference_steps) const;

private:
    std::vector<double> alphas_;
    std::vector<double> alpha_bars_;
    std::vector<double> sigmas_;
    std::vector<int> timesteps_;

    friend NoiseSchedule build_schedule(const ScheduleOptions& options);
};

NoiseSchedule build_schedule(const ScheduleOptions& options);
NoiseSchedule build_schedule(int num_train_steps, double beta_min, double beta_max, BetaSpacing spacing,
                             int num_inference_steps);

/// T, T - stride, ..., stride with stride = T / n.
std::vector<int> evenly_spaced_timesteps(int num_train_steps, int num_inference_steps);

/// Closed-form marginal q(z_t | z_0).
LatentClip forward_diffuse(const LatentClip& z0, int t, const torch::Tensor& noise, const NoiseSchedule& schedule);

/// One ancestral step z_t -> z_{t-1}. `noise` may be undefined when sigma_t == 0.
LatentClip ddpm_step(const LatentClip& z_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& schedule,
                     const torch::Tensor& noise = {});

/// DDIM update z_t -> z_{t_prev}. With eta == 0 the step is deterministic and
/// `noise` is ignored.
LatentClip ddim_step(const LatentClip& z_t, const torch::Tensor& eps_hat, int t, int t_prev,
                     const NoiseSchedule& schedule, double eta = 0.0, const torch::Tensor& noise = {});

/// Exact inverse of the eta == 0 DDIM step: z_{t_prev} -> z_t under the same eps_hat.
LatentClip ddim_invert_step(const LatentClip& z_prev, const torch::Tensor& eps_hat, int t_prev, int t,
                            const NoiseSchedule& schedule);

}  // namespace magus
