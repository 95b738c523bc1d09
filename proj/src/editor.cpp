#include "magus/editor.hpp"

#include <cmath>
#include <cstdio>

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>

#include "magus/error.hpp"
#include "magus/tensor_io.hpp"

namespace magus {
namespace {

using nlohmann::json;

std::vector<int> included_sites(const AttentionMaps& edit, const AttentionMaps& origin, const LossOptions& options) {
    if (edit.size() != origin.size()) {
        throw ShapeError("attention maps have " + std::to_string(edit.size()) + " and " +
                         std::to_string(origin.size()) + " sites");
    }
    if (!options.sites.empty() && options.sites.size() != edit.size()) {
        throw ParameterError("site selection has " + std::to_string(options.sites.size()) + " entries for " +
                             std::to_string(edit.size()) + " sites");
    }
    std::vector<int> out;
    for (std::size_t s = 0; s < edit.size(); ++s) {
        if (edit.sites[s].sizes() != origin.sites[s].sizes()) {
            throw ShapeError("attention map shapes differ at site " + std::to_string(s) +
                             "; the edited prompt must keep the source token layout (use a delta edit)");
        }
        if (options.sites.empty() || options.sites[s]) out.push_back(static_cast<int>(s));
    }
    if (out.empty()) throw ParameterError("no attention sites selected");
    return out;
}

/// Sum of squared differences before the final square root.
torch::Tensor squared_loss(const AttentionMaps& edit, const AttentionMaps& origin, const LossOptions& options) {
    const auto sites = included_sites(edit, origin, options);
    torch::Tensor total;
    for (const int s : sites) {
        const auto& e = edit.sites[s];
        const auto term = (e - origin.sites[s].to(e.scalar_type())).pow(2).sum();
        total = total.defined() ? total + term : term;
    }
    if (options.reduction == LossReduction::site_mean) total = total / static_cast<double>(sites.size());
    return total;
}

NoisePrediction guided_eps(const SamplingContext& ctx, const torch::Tensor& z, int t, const PromptEmbedding& e,
                           double w, bool capture) {
    torch::NoGradGuard guard;
    auto cond = ctx.denoiser.forward(z, t, e, capture);
    if (w != 1.0) {
        if (!ctx.unconditional) throw ParameterError("guidance scale != 1 needs an unconditional embedding");
        const auto uncond = ctx.denoiser.forward(z, t, *ctx.unconditional, false);
        cond.eps = cfg_combine(uncond.eps, cond.eps, w);
    }
    if (!torch::isfinite(cond.eps).all().item<bool>()) throw NumericError("noise prediction is not finite", t);
    if (ctx.x0_range) cond.eps = clamp_prediction(z, cond.eps, t, ctx.schedule, *ctx.x0_range);
    return cond;
}

void check_finite(const LatentClip& z, int t) {
    if (!z.all_finite()) throw NumericError("latent became non-finite", t);
}

}  // namespace

torch::Tensor clamp_prediction(const torch::Tensor& z_t, const torch::Tensor& eps, int t, const NoiseSchedule& schedule,
                               std::pair<double, double> x0_range) {
    if (!(x0_range.first < x0_range.second)) throw ParameterError("x0 range must be increasing");
    const double ab = schedule.alpha_bar(t);
    if (ab >= 1.0) return eps;
    const auto x0 = ((z_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab)).clamp(x0_range.first, x0_range.second);
    return (z_t - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
}

void AttentionTrajectory::save(const std::filesystem::path& path) const {
    Checkpoint ck;
    ck.config_json = json{{"schema", "magus.attention_trajectory"}, {"version", 1}, {"timesteps", timesteps}}.dump();
    for (std::size_t i = 0; i < steps.size(); ++i) {
        for (std::size_t s = 0; s < steps[i].size(); ++s) {
            ck.tensors.emplace_back("step" + std::to_string(i) + "/site" + std::to_string(s), steps[i].sites[s]);
        }
    }
    write_checkpoint(path, ck);
}

AttentionTrajectory AttentionTrajectory::load(const std::filesystem::path& path) {
    const auto ck = read_checkpoint(path);
    const auto header = json::parse(ck.config_json);
    if (header.value("schema", "") != "magus.attention_trajectory") throw FormatError("not an attention trajectory");
    AttentionTrajectory out;
    out.timesteps = header.at("timesteps").get<std::vector<int>>();
    out.steps.resize(out.timesteps.size());
    for (const auto& [name, tensor] : ck.tensors) {
        int step = 0, site = 0;
        if (std::sscanf(name.c_str(), "step%d/site%d", &step, &site) != 2 || step < 0 ||
            step >= static_cast<int>(out.steps.size())) {
            throw FormatError("unexpected trajectory entry '" + name + "'");
        }
        auto& sites = out.steps[step].sites;
        if (static_cast<int>(sites.size()) != site) throw FormatError("trajectory sites out of order");
        sites.push_back(tensor.to(torch::kFloat64));
    }
    return out;
}

double attention_loss(const AttentionMaps& edit, const AttentionMaps& origin, const LossOptions& options) {
    torch::NoGradGuard guard;
    AttentionMaps e;
    for (const auto& s : edit.sites) e.sites.push_back(s.to(torch::kFloat64));
    return std::sqrt(squared_loss(e, origin, options).item<double>());
}

torch::Tensor attention_loss_tensor(const AttentionMaps& edit, const AttentionMaps& origin,
                                    const LossOptions& options) {
    return squared_loss(edit, origin, options).sqrt();
}

LossGradient attention_loss_gradient(const Denoiser& denoiser, const torch::Tensor& z_t, int t,
                                     const PromptEmbedding& edit_embedding, const AttentionMaps& origin,
                                     const LossOptions& options) {
    torch::AutoGradMode enable(true);
    const auto z = z_t.detach().clone().requires_grad_(true);
    const auto pred = denoiser.forward(z, t, edit_embedding, true);
    const auto sq = squared_loss(*pred.maps, origin, options);
    const double sq_value = sq.item<double>();
    if (!std::isfinite(sq_value)) throw NumericError("attention loss is not finite", t);
    LossGradient out;
    out.loss = std::sqrt(sq_value);
    if (sq_value == 0.0) {
        // sqrt has no derivative at 0; the minimum is a fixed point.
        out.grad = torch::zeros_like(z_t);
        return out;
    }
    out.grad = torch::autograd::grad({sq.sqrt()}, {z})[0].detach();
    if (!torch::isfinite(out.grad).all().item<bool>()) throw NumericError("attention loss gradient is not finite", t);
    return out;
}

torch::Tensor cfg_combine(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double w) {
    if (eps_uncond.sizes() != eps_cond.sizes()) throw ShapeError("guidance operands differ in shape");
    if (w == 1.0) return eps_cond.clone();
    if (w == 0.0) return eps_uncond.clone();
    return eps_uncond + w * (eps_cond - eps_uncond);
}

Reconstruction reconstruct_and_record(const LatentClip& z_T, const PromptEmbedding& embedding,
                                      const SamplingContext& ctx, double guidance_scale) {
    if (guidance_scale < 0.0) throw ParameterError("guidance scale must be non-negative");
    const auto timesteps = ctx.schedule.inference_timesteps();
    Reconstruction out;
    LatentClip z = z_T.with_data(z_T.data.to(torch::kFloat64));
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        const int t = timesteps[i];
        const int t_prev = ctx.schedule.previous_timestep(static_cast<int>(i));
        out.latents.push_back(z.data);
        auto pred = guided_eps(ctx, z.data, t, embedding, guidance_scale, true);
        out.origin.timesteps.push_back(t);
        out.origin.steps.push_back(std::move(*pred.maps));
        z = ddim_step(z, pred.eps, t, t_prev, ctx.schedule, 0.0);
        check_finite(z, t);
    }
    out.latents.push_back(z.data);
    out.z0 = z;
    return out;
}

StepResult constrained_edit_step(const LatentClip& z_t, const PromptEmbedding& edit_embedding,
                                 const AttentionMaps& origin_t, int t, int t_prev, const SamplingContext& ctx,
                                 const EditOptions& options) {
    if (options.alpha < 0.0) throw ParameterError("alpha must be non-negative");
    StepRecord record{t, 0.0, 0.0};
    torch::Tensor shifted = z_t.data;
    const bool constrained = options.constraint_enabled && options.alpha > 0.0;
    if (constrained) {
        const auto lg = attention_loss_gradient(ctx.denoiser, z_t.data, t, edit_embedding, origin_t, options.loss);
        record.loss = lg.loss;
        record.grad_norm = lg.grad.norm().item<double>();
        if (lg.loss > 0.0) shifted = z_t.data - options.alpha * lg.grad;
    }
    auto pred = guided_eps(ctx, shifted, t, edit_embedding, options.guidance_scale, !constrained);
    if (!constrained) record.loss = attention_loss(*pred.maps, origin_t, options.loss);
    auto z_prev = ddim_step(z_t, pred.eps, t, t_prev, ctx.schedule, 0.0);
    check_finite(z_prev, t);
    return {std::move(z_prev), record};
}

EditOutcome edit_with_origin(const LatentClip& z_T, const Reconstruction& recon, const PromptEmbedding& embedding,
                             const PromptEmbedding& edit_embedding, const SamplingContext& ctx,
                             const EditOptions& options) {
    if (options.alpha < 0.0) throw ParameterError("alpha must be non-negative");
    if (options.guidance_scale < 0.0) throw ParameterError("guidance scale must be non-negative");
    if (options.constraint_enabled && options.alpha > 0.0 &&
        !torch::equal(embedding.valid_mask.to(torch::kBool), edit_embedding.valid_mask.to(torch::kBool))) {
        throw ShapeError("edited prompt has a different token layout than the source; "
                         "attention maps cannot be compared (use a delta edit)");
    }
    const auto timesteps = ctx.schedule.inference_timesteps();
    if (recon.origin.size() != timesteps.size()) {
        throw ShapeError("recorded trajectory length does not match the schedule");
    }
    EditOutcome out;
    const auto before = ctx.denoiser.evaluations();
    LatentClip z = z_T.with_data(z_T.data.to(torch::kFloat64));
    for (std::size_t i = 0; i < timesteps.size(); ++i) {
        out.edited_latents.push_back(z.data);
        auto step = constrained_edit_step(z, edit_embedding, recon.origin.steps[i], timesteps[i],
                                          ctx.schedule.previous_timestep(static_cast<int>(i)), ctx, options);
        z = std::move(step.z_prev);
        out.steps.push_back(step.record);
    }
    out.edited_latents.push_back(z.data);
    out.edit_evaluations = ctx.denoiser.evaluations() - before;
    out.original = recon.z0;
    out.edited = z;
    out.origin = recon.origin;
    return out;
}

EditOutcome edit_latent(const LatentClip& z_T, const PromptEmbedding& embedding, const PromptEmbedding& edit_embedding,
                        const SamplingContext& ctx, const EditOptions& options) {
    if (options.constraint_enabled && options.alpha > 0.0 &&
        !torch::equal(embedding.valid_mask.to(torch::kBool), edit_embedding.valid_mask.to(torch::kBool))) {
        throw ShapeError("edited prompt has a different token layout than the source; "
                         "attention maps cannot be compared (use a delta edit)");
    }
    const auto before = ctx.denoiser.evaluations();
    const auto recon = reconstruct_and_record(z_T, embedding, ctx, options.guidance_scale);
    const auto recon_evaluations = ctx.denoiser.evaluations() - before;
    auto out = edit_with_origin(z_T, recon, embedding, edit_embedding, ctx, options);
    out.reconstruction_evaluations = recon_evaluations;
    return out;
}

PromptEmbedding edited_embedding(const EditRequest& request, const PromptEmbedding& source,
                                 const PromptEmbedding& target) {
    if (!request.use_delta) return target;
    if (!request.direction) throw ParameterError("a delta edit needs an edit direction");
    return apply_edit(source, *request.direction, target);
}

torch::Tensor initial_noise(const DenoiserConfig& config, std::uint64_t seed) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    return torch::randn({config.in_channels, config.freq_bins, config.time_frames}, gen,
                        torch::TensorOptions().dtype(torch::kFloat64));
}

EditResult edit(const EditRequest& request, const Denoiser& denoiser, const NoiseSchedule& schedule,
                const TextEncoder& encoder) {
    if (request.alpha < 0.0) throw ParameterError("alpha must be non-negative");
    if (request.guidance_scale < 0.0) throw ParameterError("guidance scale must be non-negative");
    if (request.num_inference_steps < 1) throw ParameterError("need at least one inference step");
    const auto source = embed_prompt(request.source_prompt, encoder);
    const auto target = embed_prompt(request.target_prompt, encoder);
    const auto edit_embedding = edited_embedding(request, source, target);
    const auto sched = schedule.with_inference_steps(request.num_inference_steps);
    std::optional<PromptEmbedding> uncond;
    if (request.guidance_scale != 1.0) uncond = embed_prompt(std::string_view{}, encoder);
    const SamplingContext ctx{denoiser, sched, uncond ? &*uncond : nullptr, request.x0_range};
    const EditOptions options{request.alpha, request.guidance_scale, request.constraint_enabled, request.loss};
    const LatentClip z_T(initial_noise(denoiser.config(), request.seed));
    auto outcome = edit_latent(z_T, source, edit_embedding, ctx, options);
    EditResult result{outcome.original, outcome.edited, outcome.steps, ""};
    result.report = edit_report_json(request, outcome, denoiser.config());
    return result;
}

std::string edit_report_json(const EditRequest& request, const EditOutcome& outcome, const DenoiserConfig& config) {
    json steps = json::array();
    for (const auto& s : outcome.steps) steps.push_back({{"t", s.t}, {"loss", s.loss}, {"grad_norm", s.grad_norm}});
    json sites = json::array();
    for (int s = 0; s < config.num_sites(); ++s) {
        sites.push_back(request.loss.sites.empty() || request.loss.sites[s]);
    }
    json j{{"schema", "magus.edit_report"},
           {"version", 1},
           {"source_prompt", request.source_prompt},
           {"target_prompt", request.target_prompt},
           {"seed", request.seed},
           {"alpha", request.alpha},
           {"guidance_scale", request.guidance_scale},
           {"num_inference_steps", request.num_inference_steps},
           {"constraint_enabled", request.constraint_enabled},
           {"use_delta", request.use_delta},
           {"loss_reduction", request.loss.reduction == LossReduction::stacked ? "stacked" : "site_mean"},
           {"sites", sites},
           {"x0_range", request.x0_range ? json{request.x0_range->first, request.x0_range->second} : json(nullptr)},
           {"steps", steps},
           {"evaluations", {{"reconstruction", outcome.reconstruction_evaluations}, {"edit", outcome.edit_evaluations}}}};
    if (request.direction) j["direction"] = json::parse(request.direction->to_json());
    return j.dump(2);
}

}  // namespace magus
