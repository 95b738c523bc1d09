#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <torch/torch.h>

#include "magus/bench.hpp"
#include "magus/codec.hpp"
#include "magus/condition.hpp"
#include "magus/denoiser.hpp"
#include "magus/editor.hpp"
#include "magus/error.hpp"
#include "magus/inversion.hpp"
#include "magus/metrics.hpp"
#include "magus/schedule.hpp"
#include "magus/toybench.hpp"

namespace py = pybind11;
using namespace magus;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const torch::Tensor& t) {
    const auto c = t.detach().to(torch::kFloat64).contiguous();
    std::vector<py::ssize_t> shape(c.sizes().begin(), c.sizes().end());
    Array out(shape);
    std::memcpy(out.mutable_data(), c.data_ptr<double>(), sizeof(double) * c.numel());
    return out;
}

torch::Tensor from_numpy(const Array& a) {
    std::vector<int64_t> shape(a.shape(), a.shape() + a.ndim());
    return torch::from_blob(const_cast<double*>(a.data()), shape, torch::kFloat64).clone();
}

torch::Tensor clip_tensor(const Array& a) {
    auto t = from_numpy(a);
    if (t.dim() == 2) t = t.unsqueeze(0);
    if (t.dim() != 3) throw ShapeError("clips have shape (C, F, T) or (F, T)");
    return t;
}

py::dict embedding_dict(const PromptEmbedding& e) {
    py::dict d;
    d["sentence"] = to_numpy(e.sentence);
    d["sequence"] = to_numpy(e.sequence);
    d["pooled"] = to_numpy(e.pooled);
    d["valid_mask"] = to_numpy(e.valid_mask);
    return d;
}

EditDirection direction(const std::string& src, const std::string& tgt, int n, std::uint64_t seed,
                        const TextEncoder& encoder) {
    const auto bank = CaptionBank::defaults();
    auto dir = compute_delta(synthesize_captions(src, bank, n, seed), synthesize_captions(tgt, bank, n, seed), encoder);
    dir.source_keyword = src;
    dir.target_keyword = tgt;
    return dir;
}

/// Keyword of `prompt` in the same vocabulary as `target`.
std::string source_keyword_for(const std::string& prompt, const std::string& target) {
    const auto bank = CaptionBank::defaults();
    const auto category = bank.category_of(target);
    if (!category) throw ParameterError("'" + target + "' is not in the caption bank");
    for (const auto& token : tokenize(prompt)) {
        if (bank.category_of(token) != category) continue;
        for (const auto* list : {&bank.moods, &bank.genres, &bank.timbres}) {
            for (const auto& w : *list) {
                if (tokenize(w).front() == token) return w;
            }
        }
    }
    throw ParameterError("prompt names no " + *category + " to replace");
}

class Model {
public:
    explicit Model(const std::filesystem::path& path)
        : bundle_(load_model(path)), encoder_(bundle_.encoder), schedule_(build_schedule(bundle_.schedule)) {}

    Array generate(const std::string& prompt, std::uint64_t seed, int steps, double guidance) const {
        py::gil_scoped_release release;
        const auto E = embed_prompt(prompt, encoder_);
        const auto uncond = embed_prompt(std::string_view{}, encoder_);
        const SamplingContext ctx{*bundle_.denoiser, schedule_.with_inference_steps(steps),
                                  guidance != 1.0 ? &uncond : nullptr, bundle_.x0_range};
        const LatentClip z_T(initial_noise(bundle_.denoiser->config(), seed));
        const auto z0 = reconstruct_and_record(z_T, E, ctx, guidance).z0.data;
        py::gil_scoped_acquire acquire;
        return to_numpy(z0);
    }

    py::dict edit(const std::string& source, const std::string& target_keyword, std::uint64_t seed, int steps,
                  double alpha, double guidance, bool constraint, int captions) const {
        EditRequest req;
        req.source_prompt = source;
        const auto src_kw = source_keyword_for(source, target_keyword);
        req.target_prompt = swap_keyword(source, src_kw, target_keyword);
        req.direction = direction(src_kw, target_keyword, captions, 0, encoder_);
        req.alpha = alpha;
        req.guidance_scale = guidance;
        req.seed = seed;
        req.num_inference_steps = steps;
        req.constraint_enabled = constraint;
        req.x0_range = bundle_.x0_range;
        EditResult result;
        {
            py::gil_scoped_release release;
            result = magus::edit(req, *bundle_.denoiser, schedule_, encoder_);
        }
        py::dict d;
        d["target_prompt"] = req.target_prompt;
        d["original"] = to_numpy(result.original.data);
        d["edited"] = to_numpy(result.edited.data);
        d["report"] = result.report;
        return d;
    }

    py::dict invert_edit(const Array& clip, const std::string& target_keyword, int steps, double alpha,
                         int refine_iters, int captions) const {
        const LatentClip z0(clip_tensor(clip));
        ToyCaptioner captioner;
        const auto caption = captioner.caption(z0);
        const auto src_kw = source_keyword_for(caption, target_keyword);
        RealEditRequest req;
        req.source_keyword = src_kw;
        req.target_keyword = target_keyword;
        req.direction = direction(src_kw, target_keyword, captions, 0, encoder_);
        req.edit.alpha = alpha;
        req.inversion.num_inference_steps = steps;
        req.inversion.refine_iters = refine_iters;
        req.x0_range = bundle_.x0_range;
        RealEditResult result;
        {
            py::gil_scoped_release release;
            result = edit_real(z0, req, *bundle_.denoiser, schedule_, encoder_, &captioner);
        }
        py::dict d;
        d["caption"] = result.caption;
        d["target_prompt"] = result.target_prompt;
        d["z_T"] = to_numpy(result.z_T.data);
        d["reconstruction"] = to_numpy(result.reconstruction.data);
        d["edited"] = to_numpy(result.edited.data);
        return d;
    }

    py::dict config() const {
        const auto& c = bundle_.denoiser->config();
        py::dict d;
        d["freq_bins"] = c.freq_bins;
        d["time_frames"] = c.time_frames;
        d["channels"] = c.channels;
        d["heads"] = c.heads;
        return d;
    }

private:
    ModelBundle bundle_;
    ToyTextEncoder encoder_;
    NoiseSchedule schedule_;
};

py::dict probe_dict(const ProbeResult& p) {
    py::dict d;
    d["silence"] = p.silence;
    d["mood"] = p.attributes.mood;
    d["genre"] = p.attributes.genre;
    d["timbre"] = p.attributes.timbre;
    d["caption"] = p.silence ? std::string() : p.attributes.caption();
    return d;
}

}  // namespace

PYBIND11_MODULE(_magus, m) {
    m.doc() = "Attention-constrained text-guided music editing on a toy diffusion model";

    py::register_exception<Error>(m, "MagusError", PyExc_RuntimeError);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_property_readonly("num_train_steps", &NoiseSchedule::num_train_steps)
        .def("alpha", &NoiseSchedule::alpha)
        .def("alpha_bar", &NoiseSchedule::alpha_bar)
        .def("beta", &NoiseSchedule::beta)
        .def("sigma", &NoiseSchedule::sigma)
        .def("inference_timesteps",
             [](const NoiseSchedule& s, int n) {
                 const auto respaced = s.with_inference_steps(n);
                 const auto r = respaced.inference_timesteps();
                 return std::vector<int>(r.begin(), r.end());
             })
        .def(
            "ddim_step",
            [](const NoiseSchedule& s, const Array& z, const Array& eps, int t, int t_prev) {
                return to_numpy(ddim_step(LatentClip(clip_tensor(z)), clip_tensor(eps), t, t_prev, s).data);
            },
            py::arg("z"), py::arg("eps"), py::arg("t"), py::arg("t_prev"))
        .def(
            "ddim_invert_step",
            [](const NoiseSchedule& s, const Array& z, const Array& eps, int t_prev, int t) {
                return to_numpy(ddim_invert_step(LatentClip(clip_tensor(z)), clip_tensor(eps), t_prev, t, s).data);
            },
            py::arg("z"), py::arg("eps"), py::arg("t_prev"), py::arg("t"));

    m.def(
        "build_schedule",
        [](int num_train_steps, double beta_min, double beta_max, const std::string& spacing, double eta) {
            ScheduleOptions o;
            o.num_train_steps = num_train_steps;
            o.beta_min = beta_min;
            o.beta_max = beta_max;
            if (spacing == "linear") o.spacing = BetaSpacing::linear;
            else if (spacing == "scaled_linear") o.spacing = BetaSpacing::scaled_linear;
            else throw ParameterError("spacing is linear or scaled_linear");
            o.eta = eta;
            return build_schedule(o);
        },
        py::arg("num_train_steps") = 1000, py::arg("beta_min") = 1e-4, py::arg("beta_max") = 0.02,
        py::arg("spacing") = "linear", py::arg("eta") = 0.0);

    m.def("tokenize", [](const std::string& text) { return tokenize(text); });
    m.def("swap_keyword", [](const std::string& p, const std::string& a, const std::string& b) {
        return swap_keyword(p, a, b);
    });
    m.def(
        "synthesize_captions",
        [](const std::string& keyword, int n, std::uint64_t seed) {
            return synthesize_captions(keyword, CaptionBank::defaults(), n, seed);
        },
        py::arg("keyword"), py::arg("n") = 64, py::arg("seed") = 0);
    m.def("embed", [](const std::string& prompt) {
        const ToyTextEncoder enc(ToyEncoderConfig::defaults());
        return embedding_dict(embed_prompt(prompt, enc));
    });
    m.def(
        "compute_delta",
        [](const std::string& source, const std::string& target, int n, std::uint64_t seed) {
            const ToyTextEncoder enc(ToyEncoderConfig::defaults());
            return to_numpy(direction(source, target, n, seed, enc).delta);
        },
        py::arg("source_keyword"), py::arg("target_keyword"), py::arg("captions") = 64, py::arg("seed") = 0);

    m.def(
        "generate_clip",
        [](const std::string& caption, std::uint64_t melody_seed) {
            return to_numpy(generate_clip(parse_attributes(caption), melody_seed).clip.data);
        },
        py::arg("caption"), py::arg("melody_seed") = 0);
    m.def("probe", [](const Array& clip) { return probe_dict(attribute_probe(clip_tensor(clip))); });
    m.def(
        "chroma_similarity",
        [](const Array& a, const Array& b, int pitch_classes) {
            return chroma_similarity(chromagram(LatentClip(clip_tensor(a)), pitch_classes),
                                     chromagram(LatentClip(clip_tensor(b)), pitch_classes));
        },
        py::arg("original"), py::arg("edited"), py::arg("pitch_classes") = 8);
    m.def("autocorr_penalty", [](const Array& z) { return autocorr_penalty(clip_tensor(z)).item<double>(); });
    m.def(
        "paired_t_test",
        [](const std::vector<double>& a, const std::vector<double>& b) {
            const auto r = paired_t_test(a, b);
            return py::make_tuple(r.mean_diff, r.t_stat, r.p_value);
        },
        "One-sided test of mean(a - b) > 0; returns (mean_diff, t, p).");

    py::class_<Model>(m, "Model")
        .def(py::init<const std::filesystem::path&>(), py::arg("path"))
        .def_property_readonly("config", &Model::config)
        .def("generate", &Model::generate, py::arg("prompt"), py::arg("seed") = 0, py::arg("steps") = 50,
             py::arg("guidance") = 1.0)
        .def("edit", &Model::edit, py::arg("source"), py::arg("target_keyword"), py::arg("seed") = 0,
             py::arg("steps") = 50, py::arg("alpha") = 0.04, py::arg("guidance") = 1.0, py::arg("constraint") = true,
             py::arg("captions") = 64)
        .def("invert_edit", &Model::invert_edit, py::arg("clip"), py::arg("target_keyword"), py::arg("steps") = 100,
             py::arg("alpha") = 0.04, py::arg("refine_iters") = 0, py::arg("captions") = 64);
}
