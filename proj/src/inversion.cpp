#include "magus/inversion.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <sys/wait.h>

#include "magus/error.hpp"
#include "magus/tensor_io.hpp"

namespace magus {

void InversionConfig::validate() const {
    if (num_inference_steps < 1) throw ParameterError("inversion needs at least one step");
    if (!(guidance_scale >= 0.0) || !std::isfinite(guidance_scale)) {
        throw ParameterError("guidance scale must be finite and non-negative");
    }
    if (!std::isfinite(autocorr_weight) || autocorr_weight < 0.0) {
        throw ParameterError("autocorr weight must be finite and non-negative");
    }
    if (autocorr_iters < 0) throw ParameterError("autocorr iterations must be non-negative");
    if (!std::isfinite(autocorr_step) || autocorr_step <= 0.0) throw ParameterError("autocorr step must be positive");
    if (refine_iters < 0) throw ParameterError("refine iterations must be non-negative");
}

namespace {

torch::Tensor guided(const Denoiser& denoiser, const torch::Tensor& z, int t, const PromptEmbedding& e,
                     const PromptEmbedding* uncond, double w) {
    auto eps = denoiser.forward(z, t, e, false).eps;
    if (w != 1.0) eps = cfg_combine(denoiser.forward(z, t, *uncond, false).eps, eps, w);
    return eps;
}

/// eps for which ddim_invert_step(z_prev, eps, t_prev, t) == z_t.
torch::Tensor replay_eps(const torch::Tensor& z_prev, const torch::Tensor& z_t, int t_prev, int t,
                         const NoiseSchedule& s) {
    const double ab_prev = s.alpha_bar(t_prev);
    const double ab = s.alpha_bar(t);
    const double ratio = std::sqrt(ab / ab_prev);
    const double coeff = std::sqrt(1.0 - ab) - ratio * std::sqrt(1.0 - ab_prev);
    return (z_t - ratio * z_prev) / coeff;
}

/// Solves J x = b by GMRES from x = 0, J given as a matvec.
torch::Tensor gmres(const std::function<torch::Tensor(const torch::Tensor&)>& matvec, const torch::Tensor& b,
                    int max_iters, double tol) {
    const double beta = b.norm().item<double>();
    if (beta == 0.0) return torch::zeros_like(b);
    std::vector<torch::Tensor> V{b / beta};
    auto H = torch::zeros({max_iters + 1, max_iters}, torch::kFloat64);
    auto h = H.accessor<double, 2>();
    int k = 0;
    torch::Tensor y;
    for (; k < max_iters; ++k) {
        auto w = matvec(V[k]);
        for (int j = 0; j <= k; ++j) {
            h[j][k] = (w * V[j]).sum().item<double>();
            w = w - h[j][k] * V[j];
        }
        h[k + 1][k] = w.norm().item<double>();
        // Least squares min ||beta e1 - H y|| over the current Krylov space.
        auto Hk = H.slice(0, 0, k + 2).slice(1, 0, k + 1);
        auto rhs = torch::zeros({k + 2, 1}, torch::kFloat64);
        rhs[0][0] = beta;
        y = std::get<0>(torch::linalg_lstsq(Hk, rhs));
        const double res = (rhs - Hk.matmul(y)).norm().item<double>();
        if (res <= tol * beta || h[k + 1][k] < 1e-14) {
            ++k;
            break;
        }
        V.push_back(w / h[k + 1][k]);
    }
    auto x = torch::zeros_like(b);
    for (int j = 0; j < y.size(0); ++j) x = x + y[j][0].item<double>() * V[j];
    return x;
}

}  // namespace

InversionResult invert(const LatentClip& z0, std::span<const std::string> caption, const InversionConfig& config,
                       const Denoiser& denoiser, const NoiseSchedule& schedule, const TextEncoder& encoder) {
    config.validate();
    torch::NoGradGuard guard;
    const auto embedding = embed_prompt(caption, encoder);
    std::optional<PromptEmbedding> uncond;
    if (config.guidance_scale != 1.0) uncond = embed_prompt(std::string_view{}, encoder);
    const auto sched = schedule.with_inference_steps(config.num_inference_steps);
    const auto timesteps = sched.inference_timesteps();

    InversionResult out;
    out.trace.high_guidance = config.guidance_scale > 1.0;
    LatentClip z = z0.with_data(z0.data.to(torch::kFloat64));
    const double limit = 1e3 * std::sqrt(static_cast<double>(z.data.numel()));
    for (int i = static_cast<int>(timesteps.size()) - 1; i >= 0; --i) {
        const int t = timesteps[i];
        const int t_prev = sched.previous_timestep(i);
        auto eps_at = [&](const torch::Tensor& x) {
            return guided(denoiser, x, t, embedding, uncond ? &*uncond : nullptr, config.guidance_scale)
                .to(torch::kFloat64);
        };
        // Residual of the forward step from a candidate z_t back to z_{t_prev}.
        auto residual = [&](const torch::Tensor& x, const torch::Tensor& e) {
            return ddim_step(z.with_data(x), e, t, t_prev, sched, 0.0).data - z.data;
        };
        auto eps = eps_at(z.data);
        auto next = ddim_invert_step(z, eps, t_prev, t, sched);
        double last = std::numeric_limits<double>::infinity();
        const double scale = z.data.norm().item<double>();
        for (int k = 0; k < config.refine_iters; ++k) {
            eps = eps_at(next.data);
            const auto r = residual(next.data, eps);
            const double norm_r = r.norm().item<double>();
            if (norm_r <= 1e-12 * scale) break;
            if (norm_r > 0.5 * last) {
                // Central-difference Jacobian-vector products of the residual.
                const double h = 1e-2;
                auto jvp = [&](const torch::Tensor& v) {
                    const auto up = next.data + h * v;
                    const auto down = next.data - h * v;
                    return (residual(up, eps_at(up)) - residual(down, eps_at(down))) / (2.0 * h);
                };
                const auto delta = gmres(jvp, -r, 30, 1e-6);
                // Backtrack until the residual drops.
                for (double step = 1.0; step > 1e-3; step *= 0.5) {
                    const auto trial = next.data + step * delta;
                    if (residual(trial, eps_at(trial)).norm().item<double>() < norm_r) {
                        next = next.with_data(trial);
                        break;
                    }
                }
            } else {
                next = ddim_invert_step(z, eps, t_prev, t, sched);
            }
            last = norm_r;
        }
        if (config.refine_iters > 0) eps = replay_eps(z.data, next.data, t_prev, t, sched);
        z = autocorr_regularize(next, config);
        const double norm = z.data.norm().item<double>();
        if (!std::isfinite(norm) || norm > limit) {
            throw InversionError("inversion diverged at timestep " + std::to_string(t) + " (norm " +
                                 std::to_string(norm) + ")");
        }
        out.trace.timesteps.push_back(t);
        out.trace.norms.push_back(norm);
        out.trace.eps.push_back(eps);
    }
    out.z_T = z;
    return out;
}

LatentClip replay_inversion(const LatentClip& z_T, const InversionTrace& trace, const NoiseSchedule& schedule) {
    LatentClip z = z_T.with_data(z_T.data.to(torch::kFloat64));
    for (int i = static_cast<int>(trace.eps.size()) - 1; i >= 0; --i) {
        // Timesteps are stored ascending, in inversion order.
        const int lower = i > 0 ? trace.timesteps[i - 1] : 0;
        z = ddim_step(z, trace.eps[i], trace.timesteps[i], lower, schedule, 0.0);
    }
    return z;
}

torch::Tensor autocorr_penalty(const torch::Tensor& z) {
    if (z.dim() < 2) throw ShapeError("autocorrelation penalty needs at least two spatial axes");
    const auto mean = z.mean();
    const auto centered = z - mean;
    const auto var = centered.pow(2).mean();
    const auto denom = var + 1e-8;
    auto r = mean.pow(2) + (var - 1.0).pow(2);
    for (const int64_t dim : {z.dim() - 2, z.dim() - 1}) {
        for (const int64_t lag : {1, 2, 4, 8}) {
            if (lag >= z.size(dim)) continue;
            const auto rho = (centered * torch::roll(centered, {lag}, {dim})).mean() / denom;
            r = r + rho.pow(2);
        }
    }
    return r;
}

LatentClip autocorr_regularize(const LatentClip& z, const InversionConfig& config) {
    if (config.autocorr_iters < 0) throw ParameterError("autocorr iterations must be non-negative");
    if (config.autocorr_iters == 0 || config.autocorr_weight == 0.0) return z;
    torch::AutoGradMode enable(true);
    auto x = z.data.detach().to(torch::kFloat64).clone();
    const double scale = config.autocorr_step * config.autocorr_weight * static_cast<double>(x.numel());
    for (int k = 0; k < config.autocorr_iters; ++k) {
        auto v = x.clone().requires_grad_(true);
        const auto grad = torch::autograd::grad({autocorr_penalty(v)}, {v})[0];
        if (!torch::isfinite(grad).all().item<bool>()) break;
        x = x - scale * grad;
    }
    return z.with_data(x.to(z.data.scalar_type()));
}

std::string CommandCaptioner::caption(const LatentClip& clip) const {
    std::random_device rd;
    const auto path = std::filesystem::temp_directory_path() / ("magus-caption-" + std::to_string(rd()) + ".f32t");
    write_f32t(path, clip.data);
    const std::string cmd =
        "timeout " + std::to_string(timeout_.count()) + " " + command_ + " '" + path.string() + "' 2>/dev/null";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
        std::filesystem::remove(path);
        throw ConfigurationError("cannot start captioner '" + command_ + "'");
    }
    std::string output;
    std::array<char, 256> buf{};
    while (std::fgets(buf.data(), buf.size(), pipe)) output += buf.data();
    const int status = pclose(pipe);
    std::filesystem::remove(path);
    if (WIFEXITED(status) && WEXITSTATUS(status) == 124) throw Error("captioner timed out");
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) throw Error("captioner failed: " + command_);
    const auto end = output.find('\n');
    return output.substr(0, end);
}

std::vector<std::string> caption_for_clip(const LatentClip& clip, const Captioner* captioner) {
    if (!captioner) throw ConfigurationError("no captioner registered");
    return tokenize(captioner->caption(clip));
}

RealEditResult edit_real(const LatentClip& clip, const RealEditRequest& request, const Denoiser& denoiser,
                         const NoiseSchedule& schedule, const TextEncoder& encoder, const Captioner* captioner) {
    if (!captioner) throw ConfigurationError("no captioner registered");
    RealEditResult out;
    out.caption = captioner->caption(clip);
    const auto tokens = tokenize(out.caption);

    std::string source_keyword = request.source_keyword;
    if (source_keyword.empty()) {
        const auto bank = CaptionBank::defaults();
        const auto category = bank.category_of(request.target_keyword);
        if (!category) throw ParameterError("cannot infer the source keyword for '" + request.target_keyword + "'");
        for (const auto& token : tokens) {
            if (bank.category_of(token) == category) {
                source_keyword = token;
                break;
            }
        }
        if (source_keyword.empty()) throw ParameterError("caption names no " + *category + " to replace");
    }
    out.target_prompt = swap_keyword(out.caption, source_keyword, request.target_keyword);

    const auto source = embed_prompt(tokens, encoder);
    const auto target = embed_prompt(out.target_prompt, encoder);
    PromptEmbedding edit_embedding = target;
    if (request.use_delta) {
        if (!request.direction) throw ParameterError("a delta edit needs an edit direction");
        edit_embedding = apply_edit(source, *request.direction, target);
    }

    auto inversion = invert(clip, tokens, request.inversion, denoiser, schedule, encoder);
    const auto sched = schedule.with_inference_steps(request.inversion.num_inference_steps);
    std::optional<PromptEmbedding> uncond;
    if (request.edit.guidance_scale != 1.0) uncond = embed_prompt(std::string_view{}, encoder);
    const SamplingContext ctx{denoiser, sched, uncond ? &*uncond : nullptr, request.x0_range};
    auto outcome = edit_latent(inversion.z_T, source, edit_embedding, ctx, request.edit);

    out.z_T = inversion.z_T;
    out.trace = std::move(inversion.trace);
    out.reconstruction = outcome.original;
    out.edited = outcome.edited;
    out.steps = std::move(outcome.steps);
    return out;
}

}  // namespace magus
