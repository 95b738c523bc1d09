#include "magus/schedule.hpp"

#include <cmath>
#include <string>

#include "magus/error.hpp"

namespace magus {
namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
    if (!b.defined() || a.sizes() != b.sizes()) {
        throw ShapeError(std::string(what) + " must match the latent shape");
    }
}

std::vector<double> cumulative_product(const std::vector<double>& alphas) {
    std::vector<double> out(alphas.size());
    double acc = 1.0;
    for (std::size_t i = 0; i < alphas.size(); ++i) {
        acc *= alphas[i];
        out[i] = acc;
    }
    return out;
}

}  // namespace

LatentClip::LatentClip(torch::Tensor tensor, double sample_rate_hz, double duration_s)
    : data(std::move(tensor)), sample_rate(sample_rate_hz), duration(duration_s) {
    if (data.defined() && data.dim() != 3) {
        throw ShapeError("LatentClip expects a rank-3 tensor (channels, freq_bins, time_frames), got rank " +
                         std::to_string(data.dim()));
    }
}

LatentClip LatentClip::with_data(torch::Tensor tensor) const {
    return LatentClip(std::move(tensor), sample_rate, duration);
}

bool LatentClip::all_finite() const {
    return data.defined() && torch::isfinite(data).all().item<bool>();
}

NoiseSchedule NoiseSchedule::from_alphas(std::vector<double> alphas, std::vector<double> sigmas,
                                         std::vector<int> inference_timesteps) {
    if (alphas.empty()) {
        throw ParameterError("schedule needs at least one step");
    }
    for (const double a : alphas) {
        if (!(a > 0.0 && a <= 1.0)) {
            throw ParameterError("alpha_t must lie in (0, 1]");
        }
    }
    const int T = static_cast<int>(alphas.size());
    if (sigmas.empty()) {
        sigmas.assign(alphas.size(), 0.0);
    }
    if (sigmas.size() != alphas.size()) {
        throw ParameterError("sigmas must have one entry per step");
    }
    if (inference_timesteps.empty()) {
        for (int t = T; t >= 1; --t) {
            inference_timesteps.push_back(t);
        }
    }
    for (std::size_t i = 0; i < inference_timesteps.size(); ++i) {
        const int t = inference_timesteps[i];
        if (t < 1 || t > T || (i > 0 && t >= inference_timesteps[i - 1])) {
            throw ParameterError("inference timesteps must be strictly decreasing within [1, T]");
        }
    }
    NoiseSchedule s;
    s.alpha_bars_ = cumulative_product(alphas);
    s.alphas_ = std::move(alphas);
    s.sigmas_ = std::move(sigmas);
    s.timesteps_ = std::move(inference_timesteps);
    return s;
}

double NoiseSchedule::alpha(int t) const {
    if (t < 1 || t > num_train_steps()) {
        throw ParameterError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(num_train_steps()) + "]");
    }
    return alphas_[t - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) {
        return 1.0;
    }
    if (t < 0 || t > num_train_steps()) {
        throw ParameterError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(num_train_steps()) + "]");
    }
    return alpha_bars_[t - 1];
}

double NoiseSchedule::sigma(int t) const {
    alpha(t);
    return sigmas_[t - 1];
}

int NoiseSchedule::previous_timestep(int index) const {
    if (index < 0 || index >= num_inference_steps()) {
        throw ParameterError("inference index out of range");
    }
    return index + 1 < num_inference_steps() ? timesteps_[index + 1] : 0;
}

NoiseSchedule NoiseSchedule::with_inference_steps(int num_inference_steps) const {
    NoiseSchedule copy = *this;
    copy.timesteps_ = evenly_spaced_timesteps(num_train_steps(), num_inference_steps);
    return copy;
}

std::vector<int> evenly_spaced_timesteps(int num_train_steps, int num_inference_steps) {
    if (num_inference_steps < 1 || num_inference_steps > num_train_steps) {
        throw ParameterError("num_inference_steps must lie in [1, T]");
    }
    const int stride = num_train_steps / num_inference_steps;
    std::vector<int> out;
    out.reserve(num_inference_steps);
    for (int i = 0; i < num_inference_steps; ++i) {
        out.push_back(num_train_steps - i * stride);
    }
    return out;
}

NoiseSchedule build_schedule(const ScheduleOptions& o) {
    if (o.num_train_steps < 1) {
        throw ParameterError("T must be positive");
    }
    if (!(o.beta_min > 0.0 && o.beta_min <= o.beta_max && o.beta_max < 1.0)) {
        throw ParameterError("betas must satisfy 0 < beta_min <= beta_max < 1");
    }
    if (o.eta < 0.0) {
        throw ParameterError("eta must be non-negative");
    }
    const int T = o.num_train_steps;
    std::vector<double> betas(T);
    for (int i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
        if (o.spacing == BetaSpacing::linear) {
            betas[i] = o.beta_min + frac * (o.beta_max - o.beta_min);
        } else {
            const double lo = std::sqrt(o.beta_min);
            const double hi = std::sqrt(o.beta_max);
            const double r = lo + frac * (hi - lo);
            betas[i] = r * r;
        }
    }
    std::vector<double> alphas(T), sigmas(T);
    for (int i = 0; i < T; ++i) {
        alphas[i] = 1.0 - betas[i];
        sigmas[i] = o.eta * std::sqrt(betas[i]);
    }
    return NoiseSchedule::from_alphas(std::move(alphas), std::move(sigmas),
                                      evenly_spaced_timesteps(T, o.num_inference_steps));
}

NoiseSchedule build_schedule(int num_train_steps, double beta_min, double beta_max, BetaSpacing spacing,
                             int num_inference_steps) {
    ScheduleOptions o;
    o.num_train_steps = num_train_steps;
    o.beta_min = beta_min;
    o.beta_max = beta_max;
    o.spacing = spacing;
    o.num_inference_steps = num_inference_steps;
    return build_schedule(o);
}

LatentClip forward_diffuse(const LatentClip& z0, int t, const torch::Tensor& noise, const NoiseSchedule& schedule) {
    check_same_shape(z0.data, noise, "noise");
    if (t < 1) {
        throw ParameterError("forward_diffuse needs t >= 1");
    }
    const double ab = schedule.alpha_bar(t);
    return z0.with_data(std::sqrt(ab) * z0.data + std::sqrt(1.0 - ab) * noise.to(z0.data.dtype()));
}

LatentClip ddpm_step(const LatentClip& z_t, const torch::Tensor& eps_hat, int t, const NoiseSchedule& schedule,
                     const torch::Tensor& noise) {
    check_same_shape(z_t.data, eps_hat, "eps_hat");
    if (t < 1) {
        throw ParameterError("ddpm_step needs t >= 1");
    }
    const double a = schedule.alpha(t);
    const double ab = schedule.alpha_bar(t);
    const double sigma = schedule.sigma(t);
    // A step with beta == 0 adds no noise, so it removes none.
    const double coeff = a == 1.0 ? 0.0 : (1.0 - a) / std::sqrt(1.0 - ab);
    auto mean = (z_t.data - coeff * eps_hat.to(z_t.data.dtype())) / std::sqrt(a);
    if (sigma == 0.0) {
        return z_t.with_data(mean);
    }
    check_same_shape(z_t.data, noise, "noise");
    return z_t.with_data(mean + sigma * noise.to(z_t.data.dtype()));
}

LatentClip ddim_step(const LatentClip& z_t, const torch::Tensor& eps_hat, int t, int t_prev,
                     const NoiseSchedule& schedule, double eta, const torch::Tensor& noise) {
    check_same_shape(z_t.data, eps_hat, "eps_hat");
    if (!(t > t_prev && t_prev >= 0)) {
        throw ParameterError("ddim_step needs t > t_prev >= 0 (got t=" + std::to_string(t) +
                             ", t_prev=" + std::to_string(t_prev) + ")");
    }
    if (!(eta >= 0.0 && eta <= 1.0)) {
        throw ParameterError("eta must lie in [0, 1]");
    }
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const auto eps = eps_hat.to(z_t.data.dtype());
    const auto z0_pred = (z_t.data - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    double sigma = 0.0;
    if (eta > 0.0) {
        sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    }
    auto out = std::sqrt(ab_prev) * z0_pred + std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)) * eps;
    if (sigma > 0.0) {
        check_same_shape(z_t.data, noise, "noise");
        out = out + sigma * noise.to(z_t.data.dtype());
    }
    return z_t.with_data(out);
}

LatentClip ddim_invert_step(const LatentClip& z_prev, const torch::Tensor& eps_hat, int t_prev, int t,
                            const NoiseSchedule& schedule) {
    check_same_shape(z_prev.data, eps_hat, "eps_hat");
    if (!(t > t_prev && t_prev >= 0)) {
        throw ParameterError("ddim_invert_step needs t > t_prev >= 0 (got t=" + std::to_string(t) +
                             ", t_prev=" + std::to_string(t_prev) + ")");
    }
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    const auto eps = eps_hat.to(z_prev.data.dtype());
    const auto z0_pred = (z_prev.data - std::sqrt(1.0 - ab_prev) * eps) / std::sqrt(ab_prev);
    return z_prev.with_data(std::sqrt(ab) * z0_pred + std::sqrt(1.0 - ab) * eps);
}

}  // namespace magus
