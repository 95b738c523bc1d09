#include "magus/bench.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

#include "magus/editor.hpp"
#include "magus/error.hpp"

namespace magus {

std::vector<BenchArm> default_arms() {
    return {{"no_l2_no_delta", "Ours w/o L2 & Δ", false, false},
            {"no_l2", "Ours w/o L2", true, false},
            {"full", "Ours (final)", true, true}};
}

TimbrePair parse_pair(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
        throw ParameterError("edit pair '" + text + "' is not of the form source:target");
    }
    return {text.substr(0, colon), text.substr(colon + 1)};
}

PairedTest paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("paired samples differ in length");
    if (a.size() < 2) throw ParameterError("paired test needs at least two pairs");
    PairedTest out;
    out.n = static_cast<int>(a.size());
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    for (const double x : d) out.mean_diff += x;
    out.mean_diff /= out.n;
    double ss = 0.0;
    for (const double x : d) ss += (x - out.mean_diff) * (x - out.mean_diff);
    const double sd = std::sqrt(ss / (out.n - 1));
    if (sd == 0.0) {
        out.t_stat = out.mean_diff > 0.0   ? std::numeric_limits<double>::infinity()
                     : out.mean_diff < 0.0 ? -std::numeric_limits<double>::infinity()
                                           : 0.0;
        out.p_value = out.mean_diff > 0.0 ? 0.0 : 1.0;
        return out;
    }
    out.t_stat = out.mean_diff / (sd / std::sqrt(static_cast<double>(out.n)));
    const boost::math::students_t dist(out.n - 1);
    out.p_value = boost::math::cdf(boost::math::complement(dist, out.t_stat));
    return out;
}

BenchResult run_benchmark(const Denoiser& denoiser, const NoiseSchedule& schedule, const TextEncoder& encoder,
                          std::span<const TimbrePair> pairs, int n_seeds, const BenchConfig& config) {
    if (pairs.empty()) throw ParameterError("benchmark needs at least one edit pair");
    if (n_seeds < 1) throw ParameterError("benchmark needs at least one seed");
    if (config.arms.empty()) throw ParameterError("benchmark needs at least one arm");
    const auto& space = config.space;
    const auto sched = schedule.with_inference_steps(config.num_inference_steps);
    std::optional<PromptEmbedding> uncond;
    if (config.guidance_scale != 1.0) uncond = embed_prompt(std::string_view{}, encoder);
    const SamplingContext ctx{denoiser, sched, uncond ? &*uncond : nullptr, config.x0_range};

    std::vector<EvalPair> eval_pairs;
    std::vector<std::map<std::string, double>> extras;
    int recon_hits = 0;
    int recon_slots = 0;
    std::map<std::string, std::vector<double>> chroma_by_arm;

    for (const auto& pair : pairs) {
        const auto src = space.canonical(pair.source, "timbre");
        const auto tgt = space.canonical(pair.target, "timbre");
        if (!src || !tgt) throw ParameterError("unknown timbre in pair " + pair.source + ":" + pair.target);
        const auto direction =
            compute_delta(synthesize_captions(*src, config.bank, config.num_captions, config.caption_seed),
                          synthesize_captions(*tgt, config.bank, config.num_captions, config.caption_seed),
                          encoder);
        for (int s = 0; s < n_seeds; ++s) {
            const std::uint64_t seed = config.seed_offset + static_cast<std::uint64_t>(s);
            std::mt19937_64 rng(seed);
            const auto mood = space.moods[rng() % space.moods.size()];
            const auto genre = space.genres[rng() % space.genres.size()];
            const Attributes source_attr{mood, genre, *src};
            const Attributes target_attr{mood, genre, *tgt};
            const auto E = embed_prompt(source_attr.caption(), encoder);
            const auto E_target = embed_prompt(target_attr.caption(), encoder);
            const LatentClip z_T(initial_noise(denoiser.config(), seed));
            const auto recon = reconstruct_and_record(z_T, E, ctx, config.guidance_scale);

            const auto probe = attribute_probe(recon.z0.data, space);
            recon_slots += 3;
            if (!probe.silence) {
                recon_hits += (probe.attributes.mood == mood) + (probe.attributes.genre == genre) +
                              (probe.attributes.timbre == *src);
            }

            for (const auto& arm : config.arms) {
                const auto E_edit = arm.use_delta ? apply_edit(E, direction, E_target) : E_target;
                const EditOptions options{config.alpha, config.guidance_scale, arm.constraint, {}};
                const auto outcome = edit_with_origin(z_T, recon, E, E_edit, ctx, options);
                const auto edited_probe = attribute_probe(outcome.edited.data, space);
                double mean_loss = 0.0;
                for (const auto& st : outcome.steps) mean_loss += st.loss;
                mean_loss /= static_cast<double>(outcome.steps.size());
                eval_pairs.push_back({recon.z0, outcome.edited, target_attr.caption(), arm.id,
                                      *src + "->" + *tgt + "/seed" + std::to_string(seed)});
                extras.push_back({{"target_timbre", !edited_probe.silence && edited_probe.attributes.timbre == *tgt},
                                  {"mean_attention_loss", mean_loss}});
            }
        }
    }

    BenchResult result;
    result.reconstruction_accuracy = static_cast<double>(recon_hits) / recon_slots;
    if (result.reconstruction_accuracy < config.quality_gate) {
        std::ostringstream msg;
        msg << "reconstruction probe accuracy " << result.reconstruction_accuracy << " is below the quality gate "
            << config.quality_gate << "; train the toy model longer";
        throw ModelQualityError(msg.str());
    }

    ToyProbeScorer scorer(space);
    result.report = evaluate_batch(eval_pairs, scorer, space.pitch_classes);
    for (std::size_t i = 0; i < result.report.rows.size(); ++i) {
        result.report.rows[i].extras = extras[i];
        if (!result.report.rows[i].error) chroma_by_arm[result.report.rows[i].group].push_back(result.report.rows[i].chroma);
    }
    result.report.finalize();
    for (const auto& [id, summary] : result.report.groups) {
        result.target_accuracy[id] = summary.extras.count("target_timbre") ? summary.extras.at("target_timbre") : 0.0;
    }
    if (chroma_by_arm.count("full") && chroma_by_arm.count("no_l2") &&
        chroma_by_arm["full"].size() == chroma_by_arm["no_l2"].size() && chroma_by_arm["full"].size() >= 2) {
        result.chroma_test = paired_t_test(chroma_by_arm["full"], chroma_by_arm["no_l2"]);
    }

    auto& cfg = result.report.config;
    std::string pair_list;
    for (const auto& p : pairs) pair_list += (pair_list.empty() ? "" : ",") + p.source + ":" + p.target;
    std::string arm_list;
    for (const auto& a : config.arms) arm_list += (arm_list.empty() ? "" : ",") + a.id + "=" + a.label;
    cfg["pairs"] = pair_list;
    cfg["arms"] = arm_list;
    cfg["seeds"] = std::to_string(n_seeds);
    cfg["seed_offset"] = std::to_string(config.seed_offset);
    cfg["steps"] = std::to_string(config.num_inference_steps);
    cfg["alpha"] = std::to_string(config.alpha);
    cfg["guidance_scale"] = std::to_string(config.guidance_scale);
    cfg["num_captions"] = std::to_string(config.num_captions);
    cfg["reconstruction_accuracy"] = std::to_string(result.reconstruction_accuracy);
    if (result.chroma_test) {
        cfg["chroma_full_minus_no_l2"] = std::to_string(result.chroma_test->mean_diff);
        cfg["chroma_paired_t"] = std::to_string(result.chroma_test->t_stat);
        cfg["chroma_paired_p_one_sided"] = std::to_string(result.chroma_test->p_value);
    }
    return result;
}

}  // namespace magus
