#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "magus/bench.hpp"
#include "magus/codec.hpp"
#include "magus/condition.hpp"
#include "magus/denoiser.hpp"
#include "magus/editor.hpp"
#include "magus/error.hpp"
#include "magus/inversion.hpp"
#include "magus/metrics.hpp"
#include "magus/tensor_io.hpp"
#include "magus/toybench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace magus;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

const std::set<std::string> kPathOptions{"model", "input", "bank", "original", "edited", "list"};

std::string fnv1a(const fs::path& path) {
    const auto bytes = read_file(path);
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

std::size_t levenshtein(const std::string& a, const std::string& b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

std::string closest(const std::string& word, const std::vector<std::string>& candidates) {
    std::string best;
    std::size_t best_d = 4;
    for (const auto& c : candidates) {
        const auto d = levenshtein(word, c);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

/// Output directory of one command plus its provenance record.
class Run {
public:
    Run(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
        fs::create_directories(dir_);
    }

    const fs::path& dir() const { return dir_; }
    fs::path path(const std::string& name) const { return dir_ / name; }

    void tensor(const std::string& name, const torch::Tensor& t) {
        write_f32t(path(name), t);
        outputs_.push_back(name);
    }
    void text(const std::string& name, const std::string& content) {
        write_file_atomic(path(name), content);
        outputs_.push_back(name);
    }
    void file(const std::string& name) { outputs_.push_back(name); }

    void finish(const json& options, const std::string& ini, const std::vector<std::string>& argv) {
        write_file_atomic(path("config.ini"), ini);
        json outputs = json::array();
        for (const auto& name : outputs_) {
            if (fs::is_regular_file(path(name))) outputs.push_back({{"file", name}, {"fnv1a64", fnv1a(path(name))}});
        }
        json manifest{{"schema", "magus.run_manifest"},
                      {"version", 1},
                      {"command", command_},
                      {"argv", argv},
                      {"options", options},
                      {"config", "config.ini"},
                      {"rerun", "magus --config " + path("config.ini").string() + " " + command_ + " --out <dir>"},
                      {"outputs", outputs}};
        write_file_atomic(path("manifest.json"), manifest.dump(2));
    }

private:
    fs::path dir_;
    std::string command_;
    std::vector<std::string> outputs_;
};

fs::path default_run_dir(const std::string& command) {
    const char* root = std::getenv("MAGUS_RUN_ROOT");
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    std::ostringstream name;
    name << command << "-" << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-" << getpid();
    return fs::path(root && *root ? root : "runs") / name.str();
}

std::string ini_value(const std::string& v) {
    std::string out = "\"";
    for (const char c : v) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    return out + "\"";
}

/// Resolved option values of a subcommand, as JSON and as an INI section.
json typed(const std::string& item) {
    const auto parsed = json::parse(item, nullptr, false);
    return parsed.is_number() ? parsed : json(item);
}

std::pair<json, std::string> resolve_options(const CLI::App* sub) {
    json values = json::object();
    std::ostringstream ini;
    ini << "[" << sub->get_name() << "]\n";
    for (const CLI::Option* opt : sub->get_options()) {
        if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
        const auto name = opt->get_lnames().front();
        if (name == "help") continue;
        if (opt->get_type_size_max() == 0) {
            const bool on = opt->count() > 0 && opt->as<bool>();
            values[name] = on;
            ini << name << "=" << (on ? "true" : "false") << "\n";
            continue;
        }
        std::vector<std::string> items = opt->results();
        if (items.empty() && !opt->get_default_str().empty()) items.push_back(opt->get_default_str());
        if (kPathOptions.count(name)) {
            for (auto& item : items) {
                if (!item.empty()) item = fs::absolute(item).lexically_normal().string();
            }
        }
        if (items.empty()) continue;
        if (opt->get_items_expected_max() > 1) {
            values[name] = json::array();
            for (const auto& item : items) values[name].push_back(typed(item));
            ini << name << "=[";
            for (std::size_t i = 0; i < items.size(); ++i) ini << (i ? "," : "") << ini_value(items[i]);
            ini << "]\n";
        } else {
            values[name] = typed(items.back());
            ini << name << "=" << ini_value(items.back()) << "\n";
        }
    }
    return {values, ini.str()};
}

struct Pipeline {
    ModelBundle bundle;
    std::unique_ptr<ToyTextEncoder> encoder;
    NoiseSchedule schedule;
};

Pipeline load_pipeline(const std::string& model) {
    if (model.empty()) throw ConfigurationError("--model is required");
    Pipeline p{load_model(model), nullptr, {}};
    p.encoder = std::make_unique<ToyTextEncoder>(p.bundle.encoder);
    p.schedule = build_schedule(p.bundle.schedule);
    return p;
}

CaptionBank load_bank(const std::string& path) { return path.empty() ? CaptionBank::defaults() : CaptionBank::load(path); }

/// Keyword of the prompt that shares the target keyword's vocabulary.
std::string detect_source_keyword(const std::string& prompt, const std::string& target, const CaptionBank& bank) {
    const auto category = bank.category_of(target);
    if (!category) throw ParameterError("'" + target + "' is not a mood, genre or timbre of the caption bank");
    for (const auto& token : tokenize(prompt)) {
        if (bank.category_of(token) == category) {
            for (const auto* list : {&bank.moods, &bank.genres, &bank.timbres}) {
                for (const auto& w : *list) {
                    if (tokenize(w).front() == token) return w;
                }
            }
        }
    }
    throw ParameterError("the source prompt names no " + *category + " to replace with '" + target + "'");
}

EditDirection make_direction(const std::string& source_kw, const std::string& target_kw, const CaptionBank& bank,
                             int n, std::uint64_t seed, const TextEncoder& encoder,
                             std::vector<std::string>* src_out = nullptr, std::vector<std::string>* tgt_out = nullptr) {
    const auto src = synthesize_captions(source_kw, bank, n, seed);
    const auto tgt = synthesize_captions(target_kw, bank, n, seed);
    if (src_out) *src_out = src;
    if (tgt_out) *tgt_out = tgt;
    auto dir = compute_delta(src, tgt, encoder);
    dir.source_keyword = source_kw;
    dir.target_keyword = target_kw;
    return dir;
}

torch::Tensor load_clip(const std::string& path) {
    auto t = read_f32t(path).to(torch::kFloat64);
    if (t.dim() == 2) t = t.unsqueeze(0);
    if (t.dim() != 3) throw ShapeError("clip " + path + " must have shape (C, F, T)");
    return t;
}

void maybe_wav(Run& run, bool enabled, const std::string& name, const LatentClip& clip) {
    if (!enabled) return;
    write_wav(run.path(name), render_toy_audio(clip.data, clip.sample_rate, clip.duration));
    run.file(name);
}

struct Options {
    // train-toy
    int dataset_size = 4000;
    std::uint64_t dataset_seed = 0;
    int epochs = 48;
    int batch_size = 32;
    double lr = 2e-3;
    double p_uncond = 0.1;
    double ema_decay = 0.999;
    std::string prediction = "velocity";
    std::string x0_clip = "none";
    // shared
    std::string model;
    std::uint64_t seed = 0;
    int steps = 100;
    double guidance = 1.0;
    double alpha = 0.04;
    int captions = 64;
    std::uint64_t caption_seed = 0;
    std::string bank;
    bool wav = false;
    // generate / edit
    std::string prompt;
    std::string source;
    std::string target;
    std::string target_keyword;
    std::string source_keyword;
    bool no_constraint = false;
    bool raw_target = false;
    bool save_trajectory = false;
    // invert-edit
    std::string input;
    double autocorr_weight = 0.0;
    int autocorr_iters = 0;
    double autocorr_step = 1e-2;
    int refine_iters = 0;
    std::string captioner_cmd;
    int captioner_timeout = 30;
    // bench
    std::vector<std::string> pairs{"timbreA:timbreB", "timbreB:timbreA", "timbreA:timbreC"};
    int seeds = 20;
    std::uint64_t seed_offset = 0;
    double quality_gate = 0.8;
    std::vector<std::string> arms{"no_l2_no_delta", "no_l2", "full"};
    // eval
    std::string original;
    std::string edited;
    std::string text;
    std::string list;
    // global
    int threads = 1;
};

std::optional<std::pair<double, double>> parse_range(const std::string& text) {
    if (text.empty() || text == "none") return std::nullopt;
    const auto comma = text.find(',');
    if (comma == std::string::npos) throw ParameterError("range '" + text + "' must be lo,hi or none");
    const double lo = std::stod(text.substr(0, comma));
    const double hi = std::stod(text.substr(comma + 1));
    if (!(lo < hi)) throw ParameterError("range '" + text + "' is not increasing");
    return std::make_pair(lo, hi);
}

void cmd_train(const Options& o, Run& run) {
    const auto space = AttributeSpace::defaults();
    std::cerr << "building dataset of " << o.dataset_size << " clips\n";
    const auto dataset = build_toy_dataset(o.dataset_size, o.dataset_seed, space);
    dataset.save(run.path("dataset"));
    run.file("dataset/spectrograms.f32t");
    run.file("dataset/manifest.json");

    ScheduleOptions sched_opts;
    const auto schedule = build_schedule(sched_opts);
    const auto enc_cfg = ToyEncoderConfig::defaults();
    const ToyTextEncoder encoder(enc_cfg);
    auto config = DenoiserConfig::for_encoder(enc_cfg.dims);
    if (o.prediction != "velocity" && o.prediction != "epsilon") throw ParameterError("--prediction must be velocity or epsilon");
    config.prediction = o.prediction == "velocity" ? Prediction::velocity : Prediction::epsilon;

    TrainOptions train;
    train.epochs = o.epochs;
    train.batch_size = o.batch_size;
    train.learning_rate = o.lr;
    train.p_uncond = o.p_uncond;
    train.ema_decay = o.ema_decay;
    train.seed = o.seed;
    const auto start = std::chrono::steady_clock::now();
    train.on_epoch = [&](int epoch, double loss) {
        const auto s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cerr << "epoch " << epoch + 1 << "/" << o.epochs << " loss " << loss << " (" << std::fixed
                  << std::setprecision(0) << s << "s)\n"
                  << std::defaultfloat << std::setprecision(6);
    };
    const auto result = train_toy_denoiser(dataset, schedule, encoder, config, train);

    ModelBundle bundle{result.model, enc_cfg, sched_opts, parse_range(o.x0_clip)};
    save_model(run.path("model.mgck"), bundle);
    run.file("model.mgck");
    std::ostringstream csv;
    csv << "epoch,loss\n" << std::setprecision(10);
    for (std::size_t i = 0; i < result.epoch_loss.size(); ++i) csv << i + 1 << "," << result.epoch_loss[i] << "\n";
    run.text("loss.csv", csv.str());
    std::cout << run.path("model.mgck").string() << "\n";
}

void cmd_generate(const Options& o, Run& run) {
    const auto p = load_pipeline(o.model);
    const auto E = embed_prompt(o.prompt, *p.encoder);
    const auto sched = p.schedule.with_inference_steps(o.steps);
    std::optional<PromptEmbedding> uncond;
    if (o.guidance != 1.0) uncond = embed_prompt(std::string_view{}, *p.encoder);
    const SamplingContext ctx{*p.bundle.denoiser, sched, uncond ? &*uncond : nullptr, p.bundle.x0_range};
    const LatentClip z_T(initial_noise(p.bundle.denoiser->config(), o.seed));
    const auto recon = reconstruct_and_record(z_T, E, ctx, o.guidance);
    run.tensor("generated.f32t", recon.z0.data);
    maybe_wav(run, o.wav, "generated.wav", recon.z0);
    const auto probe = attribute_probe(recon.z0.data);
    std::cout << "probe: " << (probe.silence ? "silence" : probe.attributes.caption()) << "\n";
}

void cmd_edit(const Options& o, Run& run) {
    const auto p = load_pipeline(o.model);
    const auto bank = load_bank(o.bank);
    EditRequest req;
    req.source_prompt = o.source;
    if (!o.target.empty()) {
        req.target_prompt = o.target;
    } else {
        const auto source_kw = o.source_keyword.empty() ? detect_source_keyword(o.source, o.target_keyword, bank)
                                                        : o.source_keyword;
        req.target_prompt = swap_keyword(o.source, source_kw, o.target_keyword);
        req.direction = make_direction(source_kw, o.target_keyword, bank, o.captions, o.caption_seed, *p.encoder);
    }
    req.use_delta = !o.raw_target && req.direction.has_value();
    req.alpha = o.alpha;
    req.guidance_scale = o.guidance;
    req.seed = o.seed;
    req.num_inference_steps = o.steps;
    req.constraint_enabled = !o.no_constraint;
    req.x0_range = p.bundle.x0_range;

    const auto source = embed_prompt(req.source_prompt, *p.encoder);
    const auto target = embed_prompt(req.target_prompt, *p.encoder);
    const auto edit_embedding = edited_embedding(req, source, target);
    const auto sched = p.schedule.with_inference_steps(req.num_inference_steps);
    std::optional<PromptEmbedding> uncond;
    if (req.guidance_scale != 1.0) uncond = embed_prompt(std::string_view{}, *p.encoder);
    const SamplingContext ctx{*p.bundle.denoiser, sched, uncond ? &*uncond : nullptr, req.x0_range};
    const LatentClip z_T(initial_noise(p.bundle.denoiser->config(), req.seed));
    const auto outcome = edit_latent(z_T, source, edit_embedding, ctx,
                                     EditOptions{req.alpha, req.guidance_scale, req.constraint_enabled, req.loss});

    run.tensor("original.f32t", outcome.original.data);
    run.tensor("edited.f32t", outcome.edited.data);
    run.text("report.json", edit_report_json(req, outcome, p.bundle.denoiser->config()));
    if (req.direction) {
        run.text("direction.json", req.direction->to_json());
        run.tensor("delta.f32t", req.direction->delta);
    }
    if (o.save_trajectory) {
        outcome.origin.save(run.path("trajectory.mgck"));
        run.file("trajectory.mgck");
    }
    maybe_wav(run, o.wav, "original.wav", outcome.original);
    maybe_wav(run, o.wav, "edited.wav", outcome.edited);
    const auto before = attribute_probe(outcome.original.data);
    const auto after = attribute_probe(outcome.edited.data);
    std::cout << "target:   " << req.target_prompt << "\n"
              << "original: " << (before.silence ? "silence" : before.attributes.caption()) << "\n"
              << "edited:   " << (after.silence ? "silence" : after.attributes.caption()) << "\n"
              << "chroma:   " << chroma_similarity(chromagram(outcome.original), chromagram(outcome.edited)) << "\n";
}

void cmd_invert_edit(const Options& o, Run& run) {
    const auto p = load_pipeline(o.model);
    const auto bank = load_bank(o.bank);
    const LatentClip clip(load_clip(o.input));
    std::unique_ptr<Captioner> captioner;
    if (o.captioner_cmd.empty()) {
        captioner = std::make_unique<ToyCaptioner>();
    } else {
        captioner = std::make_unique<CommandCaptioner>(o.captioner_cmd, std::chrono::seconds(o.captioner_timeout));
    }
    const auto caption = captioner->caption(clip);
    const auto source_kw =
        o.source_keyword.empty() ? detect_source_keyword(caption, o.target_keyword, bank) : o.source_keyword;

    RealEditRequest req;
    req.source_keyword = source_kw;
    req.target_keyword = o.target_keyword;
    req.direction = make_direction(source_kw, o.target_keyword, bank, o.captions, o.caption_seed, *p.encoder);
    req.use_delta = !o.raw_target;
    req.edit = EditOptions{o.alpha, o.guidance, !o.no_constraint, {}};
    req.inversion.num_inference_steps = o.steps;
    req.inversion.guidance_scale = o.guidance;
    req.inversion.autocorr_weight = o.autocorr_weight;
    req.inversion.autocorr_iters = o.autocorr_iters;
    req.inversion.autocorr_step = o.autocorr_step;
    req.inversion.refine_iters = o.refine_iters;
    req.x0_range = p.bundle.x0_range;

    // The captioner already ran; replay its answer so the pipeline sees the same caption.
    struct Fixed final : Captioner {
        std::string text;
        std::string caption(const LatentClip&) const override { return text; }
    } fixed;
    fixed.text = caption;
    const auto result = edit_real(clip, req, *p.bundle.denoiser, p.schedule, *p.encoder, &fixed);

    run.text("caption.txt", result.caption + "\n");
    run.tensor("z_T.f32t", result.z_T.data);
    run.tensor("reconstruction.f32t", result.reconstruction.data);
    run.tensor("edited.f32t", result.edited.data);
    json steps = json::array();
    for (const auto& s : result.steps) steps.push_back({{"t", s.t}, {"loss", s.loss}, {"grad_norm", s.grad_norm}});
    json report{{"schema", "magus.invert_edit_report"},
                {"version", 1},
                {"caption", result.caption},
                {"target_prompt", result.target_prompt},
                {"inversion_norms", result.trace.norms},
                {"high_guidance_inversion", result.trace.high_guidance},
                {"reconstruction_chroma", chroma_similarity(chromagram(clip), chromagram(result.reconstruction))},
                {"edited_chroma", chroma_similarity(chromagram(clip), chromagram(result.edited))},
                {"steps", steps},
                {"direction", json::parse(req.direction->to_json())}};
    run.text("report.json", report.dump(2));
    maybe_wav(run, o.wav, "edited.wav", result.edited);
    const auto after = attribute_probe(result.edited.data);
    std::cout << "caption: " << result.caption << "\n"
              << "target:  " << result.target_prompt << "\n"
              << "edited:  " << (after.silence ? "silence" : after.attributes.caption()) << "\n";
}

void cmd_delta(const Options& o, Run& run) {
    const auto bank = load_bank(o.bank);
    const auto enc_cfg = o.model.empty() ? ToyEncoderConfig::defaults() : load_model(o.model).encoder;
    const ToyTextEncoder encoder(enc_cfg);
    std::vector<std::string> src, tgt;
    const auto source_kw = o.source_keyword;
    if (source_kw.empty()) throw ConfigurationError("--source-keyword is required");
    const auto dir = make_direction(source_kw, o.target_keyword, bank, o.captions, o.caption_seed, encoder, &src, &tgt);
    export_captions(run.path("captions_source.txt"), src);
    export_captions(run.path("captions_target.txt"), tgt);
    run.file("captions_source.txt");
    run.file("captions_target.txt");
    run.tensor("delta.f32t", dir.delta);
    run.text("direction.json", dir.to_json());
    std::cout << "delta norm " << dir.delta.norm().item<double>() << "\n";
}

void cmd_bench(const Options& o, Run& run) {
    const auto p = load_pipeline(o.model);
    BenchConfig cfg;
    cfg.num_inference_steps = o.steps;
    cfg.alpha = o.alpha;
    cfg.guidance_scale = o.guidance;
    cfg.num_captions = o.captions;
    cfg.caption_seed = o.caption_seed;
    cfg.seed_offset = o.seed_offset;
    cfg.quality_gate = o.quality_gate;
    cfg.x0_range = p.bundle.x0_range;
    cfg.bank = load_bank(o.bank);
    cfg.arms.clear();
    for (const auto& id : o.arms) {
        bool found = false;
        for (const auto& arm : default_arms()) {
            if (arm.id == id) {
                cfg.arms.push_back(arm);
                found = true;
            }
        }
        if (!found) throw ParameterError("unknown arm '" + id + "'");
    }
    std::vector<TimbrePair> pairs;
    for (const auto& text : o.pairs) pairs.push_back(parse_pair(text));
    const auto result = run_benchmark(*p.bundle.denoiser, p.schedule, *p.encoder, pairs, o.seeds, cfg);
    run.text("report.json", result.report.to_json());
    run.text("report.csv", result.report.to_csv());
    std::cout << "reconstruction accuracy " << result.reconstruction_accuracy << "\n";
    std::cout << std::left << std::setw(18) << "arm" << std::setw(10) << "semantic" << std::setw(10) << "chroma"
              << std::setw(10) << "avg" << "target" << "\n";
    for (const auto& arm : cfg.arms) {
        const auto& g = result.report.groups.at(arm.id);
        std::cout << std::setw(18) << arm.id << std::setw(10) << g.semantic << std::setw(10) << g.chroma
                  << std::setw(10) << g.avg << result.target_accuracy.at(arm.id) << "\n";
    }
    if (result.chroma_test) {
        std::cout << "chroma full - no_l2: " << result.chroma_test->mean_diff << " (t " << result.chroma_test->t_stat
                  << ", one-sided p " << result.chroma_test->p_value << ")\n";
    }
}

void cmd_eval(const Options& o, Run& run) {
    std::vector<EvalPair> pairs;
    if (!o.list.empty()) {
        const auto base = fs::path(o.list).parent_path();
        const auto items = json::parse(read_file(o.list));
        for (const auto& item : items) {
            auto resolve = [&](const std::string& f) { return fs::path(f).is_absolute() ? fs::path(f) : base / f; };
            pairs.push_back({LatentClip(load_clip(resolve(item.at("original")))),
                             LatentClip(load_clip(resolve(item.at("edited")))), item.at("text"),
                             item.value("group", "default"), item.value("label", "")});
        }
    } else {
        if (o.original.empty() || o.edited.empty()) throw ConfigurationError("eval needs --list or --original/--edited");
        pairs.push_back({LatentClip(load_clip(o.original)), LatentClip(load_clip(o.edited)), o.text, "default", ""});
    }
    const ToyProbeScorer scorer;
    const auto report = evaluate_batch(pairs, scorer);
    run.text("eval.json", report.to_json());
    run.text("eval.csv", report.to_csv());
    std::cout << "semantic " << report.overall.semantic << " chroma " << report.overall.chroma << " avg "
              << report.overall.avg << " failed " << report.failed << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-guided music editing on a toy latent diffusion model"};
    app.option_defaults()->always_capture_default();
    app.require_subcommand(1);
    app.fallthrough();
    app.set_config("--config", "", "INI file with one section per subcommand; flags override it");
    std::string out;
    Options o;
    app.add_option("--out", out, "Run directory (default $MAGUS_RUN_ROOT/<command>-<time>)")->configurable(false);
    app.add_option("--threads", o.threads, "Intra-op threads")->configurable(false);

    auto* train = app.add_subcommand("train-toy", "Build the toy dataset and train the denoiser");
    train->add_option("--dataset-size", o.dataset_size, "Number of clips");
    train->add_option("--dataset-seed", o.dataset_seed, "Dataset seed");
    train->add_option("--epochs", o.epochs, "Training epochs");
    train->add_option("--batch-size", o.batch_size, "Batch size");
    train->add_option("--lr", o.lr, "Peak learning rate");
    train->add_option("--p-uncond", o.p_uncond, "Condition dropout probability");
    train->add_option("--ema-decay", o.ema_decay, "Weight EMA decay");
    train->add_option("--seed", o.seed, "Initialization and sampling seed");
    train->add_option("--prediction", o.prediction, "velocity or epsilon")->check(CLI::IsMember({"velocity", "epsilon"}));
    train->add_option("--x0-clip", o.x0_clip, "Sampling clamp for x0 estimates, lo,hi or none");

    auto* generate = app.add_subcommand("generate", "Sample a clip from a prompt");
    generate->add_option("--model", o.model, "Model checkpoint")->required();
    generate->add_option("--prompt", o.prompt, "Text prompt")->required();
    generate->add_option("--seed", o.seed, "Noise seed");
    generate->add_option("--steps", o.steps, "DDIM steps");
    generate->add_option("--guidance", o.guidance, "Classifier-free guidance scale");
    generate->add_flag("--wav", o.wav, "Also render WAV audio");

    auto* edit_cmd = app.add_subcommand("edit", "Edit a generated clip by swapping one prompt keyword");
    edit_cmd->add_option("--model", o.model, "Model checkpoint")->required();
    edit_cmd->add_option("--source", o.source, "Source prompt")->required();
    auto* tk = edit_cmd->add_option("--target-keyword", o.target_keyword, "Keyword replacing its counterpart in the source");
    auto* tp = edit_cmd->add_option("--target", o.target, "Full target prompt (raw word swap, no delta)");
    tk->excludes(tp);
    edit_cmd->add_option("--source-keyword", o.source_keyword, "Keyword to replace (detected when omitted)");
    edit_cmd->add_option("--alpha", o.alpha, "Gradient step length of the attention constraint");
    edit_cmd->add_option("--steps", o.steps, "DDIM steps");
    edit_cmd->add_option("--seed", o.seed, "Noise seed");
    edit_cmd->add_option("--guidance", o.guidance, "Classifier-free guidance scale");
    edit_cmd->add_option("--captions", o.captions, "Captions per keyword for the edit direction");
    edit_cmd->add_option("--caption-seed", o.caption_seed, "Caption synthesis seed");
    edit_cmd->add_option("--bank", o.bank, "Caption bank JSON");
    edit_cmd->add_flag("--no-constraint", o.no_constraint, "Disable the attention constraint");
    edit_cmd->add_flag("--raw-target", o.raw_target, "Condition on the raw target embedding instead of E + delta");
    edit_cmd->add_flag("--save-trajectory", o.save_trajectory, "Store the recorded attention maps");
    edit_cmd->add_flag("--wav", o.wav, "Also render WAV audio");

    auto* invert_cmd = app.add_subcommand("invert-edit", "Caption, invert and edit an existing clip");
    invert_cmd->add_option("--model", o.model, "Model checkpoint")->required();
    invert_cmd->add_option("--input", o.input, "Clip tensor (F32T, C x F x T)")->required();
    invert_cmd->add_option("--target-keyword", o.target_keyword, "Keyword to swap in")->required();
    invert_cmd->add_option("--source-keyword", o.source_keyword, "Keyword to replace (detected when omitted)");
    invert_cmd->add_option("--alpha", o.alpha, "Gradient step length of the attention constraint");
    invert_cmd->add_option("--steps", o.steps, "DDIM steps for inversion and editing");
    invert_cmd->add_option("--guidance", o.guidance, "Guidance scale for inversion and editing");
    invert_cmd->add_option("--captions", o.captions, "Captions per keyword for the edit direction");
    invert_cmd->add_option("--caption-seed", o.caption_seed, "Caption synthesis seed");
    invert_cmd->add_option("--bank", o.bank, "Caption bank JSON");
    invert_cmd->add_option("--autocorr-weight", o.autocorr_weight, "Autocorrelation regularizer weight");
    invert_cmd->add_option("--autocorr-iters", o.autocorr_iters, "Regularizer steps per inversion step");
    invert_cmd->add_option("--autocorr-step", o.autocorr_step, "Regularizer step size");
    invert_cmd->add_option("--refine-iters", o.refine_iters, "Fixed-point refinements per inversion step");
    invert_cmd->add_option("--captioner-cmd", o.captioner_cmd, "External captioner command (default: toy probe)");
    invert_cmd->add_option("--captioner-timeout", o.captioner_timeout, "Captioner timeout in seconds");
    invert_cmd->add_flag("--no-constraint", o.no_constraint, "Disable the attention constraint");
    invert_cmd->add_flag("--raw-target", o.raw_target, "Condition on the raw target embedding instead of E + delta");
    invert_cmd->add_flag("--wav", o.wav, "Also render WAV audio");

    auto* delta = app.add_subcommand("delta", "Compute an edit direction from synthesized captions");
    delta->add_option("--model", o.model, "Model checkpoint supplying the encoder (default encoder when omitted)");
    delta->add_option("--source-keyword", o.source_keyword, "Source keyword")->required();
    delta->add_option("--target-keyword", o.target_keyword, "Target keyword")->required();
    delta->add_option("--captions", o.captions, "Captions per keyword");
    delta->add_option("--caption-seed", o.caption_seed, "Caption synthesis seed");
    delta->add_option("--bank", o.bank, "Caption bank JSON");

    auto* bench = app.add_subcommand("bench", "Run the ablation benchmark on timbre edit pairs");
    bench->add_option("--model", o.model, "Model checkpoint")->required();
    bench->add_option("--pairs", o.pairs, "Edit pairs source:target");
    bench->add_option("--seeds", o.seeds, "Seeds per pair");
    bench->add_option("--seed-offset", o.seed_offset, "First seed");
    bench->add_option("--steps", o.steps, "DDIM steps")->default_val(50);
    bench->add_option("--alpha", o.alpha, "Gradient step length of the attention constraint");
    bench->add_option("--guidance", o.guidance, "Classifier-free guidance scale");
    bench->add_option("--captions", o.captions, "Captions per keyword");
    bench->add_option("--caption-seed", o.caption_seed, "Caption synthesis seed");
    bench->add_option("--bank", o.bank, "Caption bank JSON");
    bench->add_option("--quality-gate", o.quality_gate, "Minimum reconstruction probe accuracy");
    bench->add_option("--arms", o.arms, "Arms to run")->check(CLI::IsMember({"no_l2_no_delta", "no_l2", "full"}));

    auto* eval = app.add_subcommand("eval", "Score original/edited clip pairs");
    eval->add_option("--original", o.original, "Original clip tensor");
    eval->add_option("--edited", o.edited, "Edited clip tensor");
    eval->add_option("--text", o.text, "Target text");
    eval->add_option("--list", o.list, "JSON list of {original, edited, text, group, label}");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::vector<std::string> candidates;
        for (const auto* sub : app.get_subcommands({})) {
            candidates.push_back(sub->get_name());
            for (const auto* opt : sub->get_options()) {
                for (const auto& n : opt->get_lnames()) candidates.push_back("--" + n);
            }
        }
        for (const auto* opt : app.get_options()) {
            for (const auto& n : opt->get_lnames()) candidates.push_back("--" + n);
        }
        for (int i = 1; i < argc; ++i) {
            std::string arg = argv[i];
            arg = arg.substr(0, arg.find('='));
            if (std::find(candidates.begin(), candidates.end(), arg) != candidates.end()) continue;
            if (arg.rfind("--", 0) != 0 && i > 1 && std::string(argv[i - 1]).rfind("--", 0) == 0) continue;
            const auto suggestion = closest(arg, candidates);
            if (!suggestion.empty()) {
                std::cerr << "did you mean '" << suggestion << "' instead of '" << arg << "'?\n";
                break;
            }
        }
        std::cerr << "run with --help for usage\n";
        return kExitUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    if (sub == edit_cmd && o.target.empty() && o.target_keyword.empty()) {
        std::cerr << "error: edit needs --target-keyword or --target\n";
        return kExitUsage;
    }
    if (sub == eval && o.list.empty() && (o.original.empty() || o.edited.empty())) {
        std::cerr << "error: eval needs --list or both --original and --edited\n";
        return kExitUsage;
    }

    try {
        torch::set_num_threads(std::max(1, o.threads));
        const std::string command = sub->get_name();
        Run run(out.empty() ? default_run_dir(command) : fs::path(out), command);
        auto [values, ini] = resolve_options(sub);
        if (command == "train-toy") cmd_train(o, run);
        else if (command == "generate") cmd_generate(o, run);
        else if (command == "edit") cmd_edit(o, run);
        else if (command == "invert-edit") cmd_invert_edit(o, run);
        else if (command == "delta") cmd_delta(o, run);
        else if (command == "bench") cmd_bench(o, run);
        else if (command == "eval") cmd_eval(o, run);
        run.finish(values, ini, std::vector<std::string>(argv, argv + argc));
        std::cerr << "run directory: " << run.dir().string() << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
