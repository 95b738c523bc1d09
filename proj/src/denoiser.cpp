#include "magus/denoiser.hpp"

#include <cmath>
#include <limits>
#include <mutex>
#include <numbers>
#include <unordered_map>

#include <ATen/CPUGeneratorImpl.h>
#include <json.hpp>

#include "magus/error.hpp"
#include "magus/tensor_io.hpp"
#include "magus/toybench.hpp"

namespace magus {
namespace nn = torch::nn;
using nlohmann::json;

namespace {

int group_count(int channels, int groups) { return channels % groups == 0 ? groups : 1; }

struct ResBlockImpl : nn::Module {
    ResBlockImpl(int cin, int cout, int temb, int groups)
        : norm1(nn::GroupNormOptions(group_count(cin, groups), cin)),
          conv1(nn::Conv2dOptions(cin, cout, 3).padding(1)),
          time(temb, cout),
          norm2(nn::GroupNormOptions(group_count(cout, groups), cout)),
          conv2(nn::Conv2dOptions(cout, cout, 3).padding(1)) {
        register_module("norm1", norm1);
        register_module("conv1", conv1);
        register_module("time", time);
        register_module("norm2", norm2);
        register_module("conv2", conv2);
        if (cin != cout) {
            skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(cin, cout, 1)));
        }
    }

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb) {
        auto h = conv1(torch::silu(norm1(x))) + time(temb).unsqueeze(-1).unsqueeze(-1);
        h = conv2(torch::silu(norm2(h)));
        return (skip ? skip(x) : x) + h;
    }

    nn::GroupNorm norm1;
    nn::Conv2d conv1;
    nn::Linear time;
    nn::GroupNorm norm2;
    nn::Conv2d conv2;
    nn::Conv2d skip{nullptr};
};
TORCH_MODULE(ResBlock);

nn::Linear bare_linear(int in, int out) { return nn::Linear(nn::LinearOptions(in, out).bias(false)); }

struct AttentionBlockImpl : nn::Module {
    AttentionBlockImpl(int channels, const DenoiserConfig& c)
        : norm(nn::GroupNormOptions(group_count(channels, c.groups), channels)),
          proj_in(channels, c.attn_dim),
          ln(nn::LayerNormOptions({c.attn_dim})),
          query(bare_linear(c.attn_dim, c.attn_dim)),
          key_sentence(bare_linear(c.sentence_dim, c.attn_dim)),
          key_sequence(bare_linear(c.sequence_dim, c.attn_dim)),
          value_sentence(bare_linear(c.sentence_dim, c.attn_dim)),
          value_sequence(bare_linear(c.sequence_dim, c.attn_dim)),
          out(c.attn_dim, c.attn_dim),
          ff_norm(nn::LayerNormOptions({c.attn_dim})),
          ff1(c.attn_dim, 2 * c.attn_dim),
          ff2(2 * c.attn_dim, c.attn_dim),
          proj_out(c.attn_dim, channels),
          heads(c.heads) {
        register_module("norm", norm);
        register_module("proj_in", proj_in);
        register_module("ln", ln);
        register_module("query", query);
        register_module("key_sentence", key_sentence);
        register_module("key_sequence", key_sequence);
        register_module("value_sentence", value_sentence);
        register_module("value_sequence", value_sequence);
        register_module("out", out);
        register_module("ff_norm", ff_norm);
        register_module("ff1", ff1);
        register_module("ff2", ff2);
        register_module("proj_out", proj_out);
    }

    std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x, const ConditionBatch& cond) {
        const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
        auto h = proj_in(norm(x).flatten(2).transpose(1, 2));
        const auto q = query(ln(h));
        const auto k = torch::cat({key_sentence(cond.sentence), key_sequence(cond.sequence)}, 1);
        const auto v = torch::cat({value_sentence(cond.sentence), value_sequence(cond.sequence)}, 1);
        const auto mask = torch::cat(
            {cond.sentence_mask, torch::ones({B, cond.sequence.size(1)}, torch::TensorOptions().dtype(torch::kBool))},
            1);
        auto [a, maps] = masked_attention(q, k, v, mask, heads);
        h = h + out(a);
        h = h + ff2(torch::gelu(ff1(ff_norm(h))));
        auto y = proj_out(h).transpose(1, 2).reshape({B, C, H, W});
        return {x + y, maps};
    }

    nn::GroupNorm norm;
    nn::Linear proj_in;
    nn::LayerNorm ln;
    nn::Linear query, key_sentence, key_sequence, value_sentence, value_sequence;
    nn::Linear out;
    nn::LayerNorm ff_norm;
    nn::Linear ff1, ff2;
    nn::Linear proj_out;
    int heads;
};
TORCH_MODULE(AttentionBlock);

}  // namespace

class UNetImpl : public nn::Module {
public:
    explicit UNetImpl(const DenoiserConfig& c) : config(c) {
        const int temb = c.time_embed_dim;
        time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(temb, temb), nn::SiLU(), nn::Linear(temb, temb)));
        const int c0 = c.channels.front();
        input = register_module("input", nn::Conv2d(nn::Conv2dOptions(c.in_channels, c0, c.patch).stride(c.patch)));
        int prev = c0;
        const auto n = c.channels.size();
        for (std::size_t i = 0; i < n; ++i) {
            const int ch = c.channels[i];
            enc_res.push_back(register_module("enc_res" + std::to_string(i), ResBlock(prev, ch, temb, c.groups)));
            enc_attn.push_back(register_module("enc_attn" + std::to_string(i), AttentionBlock(ch, c)));
            down.push_back(register_module("down" + std::to_string(i),
                                           nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1))));
            prev = ch;
        }
        mid_res1 = register_module("mid_res1", ResBlock(prev, prev, temb, c.groups));
        mid_attn = register_module("mid_attn", AttentionBlock(prev, c));
        mid_res2 = register_module("mid_res2", ResBlock(prev, prev, temb, c.groups));
        dec_res.assign(n, ResBlock(nullptr));
        dec_attn.assign(n, AttentionBlock(nullptr));
        for (std::size_t j = n; j-- > 0;) {
            const int ch = c.channels[j];
            dec_res[j] = register_module("dec_res" + std::to_string(j), ResBlock(prev + ch, ch, temb, c.groups));
            dec_attn[j] = register_module("dec_attn" + std::to_string(j), AttentionBlock(ch, c));
            prev = ch;
        }
        out_norm = register_module("out_norm", nn::GroupNorm(nn::GroupNormOptions(group_count(c0, c.groups), c0)));
        output = register_module(
            "output", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(c0, c.in_channels, c.patch).stride(c.patch)));
        torch::NoGradGuard guard;
        output->weight.zero_();
        output->bias.zero_();
    }

    torch::Tensor time_embedding(const torch::Tensor& t) const {
        const int half = config.time_embed_dim / 2;
        const auto options = torch::TensorOptions().dtype(output->weight.scalar_type());
        const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, options) / half);
        const auto args = t.to(options.dtype()).unsqueeze(1) * freqs.unsqueeze(0);
        return torch::cat({args.sin(), args.cos()}, 1);
    }

    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& t, const ConditionBatch& cond,
                          std::vector<torch::Tensor>* maps) {
        const auto te = time_mlp->forward(time_embedding(t));
        auto record = [&](std::pair<torch::Tensor, torch::Tensor> r) {
            if (maps) maps->push_back(r.second);
            return r.first;
        };
        auto h = input(x);
        std::vector<torch::Tensor> skips;
        for (std::size_t i = 0; i < enc_res.size(); ++i) {
            h = enc_res[i](h, te);
            h = record(enc_attn[i](h, cond));
            skips.push_back(h);
            h = down[i](h);
        }
        h = mid_res1(h, te);
        h = record(mid_attn(h, cond));
        h = mid_res2(h, te);
        for (std::size_t j = dec_res.size(); j-- > 0;) {
            h = torch::nn::functional::interpolate(
                h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(
                       torch::kNearest));
            h = dec_res[j](torch::cat({h, skips[j]}, 1), te);
            h = record(dec_attn[j](h, cond));
        }
        return output(torch::silu(out_norm(h)));
    }

    DenoiserConfig config;
    nn::Sequential time_mlp{nullptr};
    nn::Conv2d input{nullptr};
    std::vector<ResBlock> enc_res;
    std::vector<AttentionBlock> enc_attn;
    std::vector<nn::Conv2d> down;
    ResBlock mid_res1{nullptr};
    AttentionBlock mid_attn{nullptr};
    ResBlock mid_res2{nullptr};
    std::vector<ResBlock> dec_res;
    std::vector<AttentionBlock> dec_attn;
    nn::GroupNorm out_norm{nullptr};
    nn::ConvTranspose2d output{nullptr};
};

void DenoiserConfig::validate() const {
    if (in_channels < 1 || patch < 1 || channels.empty()) {
        throw ConfigurationError("denoiser needs at least one stage, one input channel and patch >= 1");
    }
    for (const int c : channels) {
        if (c < 1) throw ConfigurationError("stage channels must be positive");
    }
    if (heads < 1 || attn_dim % heads != 0) {
        throw ConfigurationError("attention width " + std::to_string(attn_dim) + " is not divisible by " +
                                 std::to_string(heads) + " heads");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
        throw ConfigurationError("time embedding size must be even");
    }
    if (groups < 1 || sentence_dim < 1 || sequence_dim < 1 || max_length < 0 || sequence_tokens < 1) {
        throw ConfigurationError("invalid condition dimensions");
    }
    const int factor = patch << channels.size();
    if (freq_bins % factor != 0 || time_frames % factor != 0) {
        throw ConfigurationError("latent " + std::to_string(freq_bins) + "x" + std::to_string(time_frames) +
                                 " is not divisible by " + std::to_string(factor));
    }
}

DenoiserConfig DenoiserConfig::for_encoder(const EncoderDims& dims) {
    DenoiserConfig c;
    c.sentence_dim = dims.sentence_dim;
    c.sequence_dim = dims.sequence_dim;
    c.max_length = dims.max_length;
    c.sequence_tokens = dims.sequence_tokens;
    return c;
}

std::string DenoiserConfig::to_json() const {
    return json{{"in_channels", in_channels},   {"freq_bins", freq_bins},
                {"time_frames", time_frames},   {"patch", patch},
                {"channels", channels},         {"heads", heads},
                {"attn_dim", attn_dim},         {"time_embed_dim", time_embed_dim},
                {"groups", groups},             {"sentence_dim", sentence_dim},
                {"sequence_dim", sequence_dim}, {"max_length", max_length},
                {"sequence_tokens", sequence_tokens},
                {"prediction", prediction == Prediction::epsilon ? "epsilon" : "velocity"}}
        .dump();
}

DenoiserConfig DenoiserConfig::from_json(std::string_view text) {
    DenoiserConfig c;
    try {
        const auto j = json::parse(text);
        c.in_channels = j.value("in_channels", c.in_channels);
        c.freq_bins = j.value("freq_bins", c.freq_bins);
        c.time_frames = j.value("time_frames", c.time_frames);
        c.patch = j.value("patch", c.patch);
        c.channels = j.value("channels", c.channels);
        c.heads = j.value("heads", c.heads);
        c.attn_dim = j.value("attn_dim", c.attn_dim);
        c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
        c.groups = j.value("groups", c.groups);
        c.sentence_dim = j.value("sentence_dim", c.sentence_dim);
        c.sequence_dim = j.value("sequence_dim", c.sequence_dim);
        c.max_length = j.value("max_length", c.max_length);
        c.sequence_tokens = j.value("sequence_tokens", c.sequence_tokens);
        const auto prediction =
            j.value("prediction", std::string(c.prediction == Prediction::epsilon ? "epsilon" : "velocity"));
        if (prediction != "epsilon" && prediction != "velocity") throw FormatError("unknown prediction " + prediction);
        c.prediction = prediction == "epsilon" ? Prediction::epsilon : Prediction::velocity;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad denoiser config: ") + e.what());
    }
    c.validate();
    return c;
}

AttentionMaps AttentionMaps::detached() const {
    AttentionMaps out;
    for (const auto& s : sites) out.sites.push_back(s.detach());
    return out;
}

std::pair<torch::Tensor, torch::Tensor> masked_attention(const torch::Tensor& q, const torch::Tensor& k,
                                                         const torch::Tensor& v, const torch::Tensor& key_mask,
                                                         int heads) {
    const auto B = q.size(0), N = q.size(1), d = q.size(2), M = k.size(1);
    if (d % heads != 0 || k.size(2) != d || v.size(2) != d || v.size(1) != M || key_mask.size(1) != M) {
        throw ShapeError("attention operands have inconsistent shapes");
    }
    const auto hd = d / heads;
    const auto qh = q.view({B, N, heads, hd}).transpose(1, 2);
    const auto kh = k.view({B, M, heads, hd}).transpose(1, 2);
    const auto vh = v.view({B, M, heads, hd}).transpose(1, 2);
    auto logits = torch::matmul(qh, kh.transpose(-1, -2)) / std::sqrt(static_cast<double>(hd));
    logits = logits.masked_fill(key_mask.logical_not().unsqueeze(1).unsqueeze(1),
                                -std::numeric_limits<double>::infinity());
    const auto maps = torch::softmax(logits, -1);
    const auto out = torch::matmul(maps, vh).transpose(1, 2).reshape({B, N, d});
    return {out, maps};
}

CrossAttentionResult cross_attention(const torch::Tensor& features, const PromptEmbedding& e,
                                     const CrossAttentionWeights& w) {
    if (features.dim() != 2) throw ShapeError("cross_attention expects features of shape (N, d)");
    const auto d = features.size(1);
    auto check = [&](const torch::Tensor& m, int64_t rows, const char* name) {
        if (!m.defined() || m.dim() != 2 || m.size(0) != rows || m.size(1) != d) {
            throw ShapeError(std::string("cross_attention: ") + name + " has the wrong shape");
        }
    };
    check(w.query, d, "query");
    check(w.key_sentence, e.sentence_dim(), "key_sentence");
    check(w.value_sentence, e.sentence_dim(), "value_sentence");
    check(w.key_sequence, e.sequence_dim(), "key_sequence");
    check(w.value_sequence, e.sequence_dim(), "value_sequence");
    if (w.heads < 1 || d % w.heads != 0) throw ShapeError("cross_attention: d is not divisible by heads");

    const auto dtype = features.scalar_type();
    const auto sentence = e.sentence.to(dtype);
    const auto sequence = e.sequence.to(dtype);
    const auto q = torch::matmul(features, w.query);
    const auto k = torch::cat({torch::matmul(sentence, w.key_sentence), torch::matmul(sequence, w.key_sequence)});
    const auto v = torch::cat({torch::matmul(sentence, w.value_sentence), torch::matmul(sequence, w.value_sequence)});
    const auto mask = torch::cat({e.valid_mask.to(torch::kBool), torch::ones({e.sequence_tokens()}, torch::kBool)});
    auto [out, maps] = masked_attention(q.unsqueeze(0), k.unsqueeze(0), v.unsqueeze(0), mask.unsqueeze(0), w.heads);
    return {out[0], maps[0].reshape({-1, maps.size(-1)})};
}

ConditionBatch ConditionBatch::from(const std::vector<PromptEmbedding>& embeddings, torch::Dtype dtype) {
    if (embeddings.empty()) throw ParameterError("empty condition batch");
    std::vector<torch::Tensor> s, m, q;
    for (const auto& e : embeddings) {
        s.push_back(e.sentence.to(dtype));
        m.push_back(e.valid_mask.to(torch::kBool));
        q.push_back(e.sequence.to(dtype));
    }
    return {torch::stack(s), torch::stack(m), torch::stack(q)};
}

Denoiser::Denoiser() = default;

Denoiser::Denoiser(DenoiserConfig config, std::uint64_t seed)
    : config_(std::move(config)), evaluations_(std::make_shared<std::atomic<std::int64_t>>(0)) {
    config_.validate();
    // Module constructors draw their initial weights from the global generator.
    static std::mutex init_mutex;
    std::lock_guard lock(init_mutex);
    torch::manual_seed(seed);
    net_ = std::make_shared<UNetImpl>(config_);
    set_schedule(build_schedule(ScheduleOptions{}));
}

Denoiser::~Denoiser() = default;
Denoiser::Denoiser(Denoiser&&) noexcept = default;
Denoiser& Denoiser::operator=(Denoiser&&) noexcept = default;

void Denoiser::to(torch::Dtype dtype) {
    if (!net_) throw StateError("denoiser has no weights");
    net_->to(dtype);
    dtype_ = dtype;
}

void Denoiser::set_schedule(const NoiseSchedule& schedule) {
    alpha_bars_.assign(schedule.alpha_bars().begin(), schedule.alpha_bars().end());
}

void Denoiser::check_input(const torch::Tensor& z, int t) const {
    if (!net_) throw StateError("denoiser has no weights");
    if (!z.defined() || z.dim() != 3 || z.size(0) != config_.in_channels || z.size(1) != config_.freq_bins ||
        z.size(2) != config_.time_frames) {
        throw ShapeError("latent must have shape (" + std::to_string(config_.in_channels) + ", " +
                         std::to_string(config_.freq_bins) + ", " + std::to_string(config_.time_frames) + ")");
    }
    if (t < 1) throw ParameterError("timesteps start at 1");
}

NoisePrediction Denoiser::forward(const torch::Tensor& z_t, int t, const PromptEmbedding& embedding,
                                  bool capture) const {
    check_input(z_t, t);
    if (embedding.sentence_dim() != config_.sentence_dim || embedding.sequence_dim() != config_.sequence_dim) {
        throw ShapeError("prompt embedding widths do not match the denoiser");
    }
    const auto cond = ConditionBatch::from({embedding}, dtype_);
    const auto tt = torch::full({1}, t, torch::kLong);
    std::vector<torch::Tensor> maps;
    const auto x = z_t.to(dtype_).unsqueeze(0);
    auto eps = net_->forward(x, tt, cond, capture ? &maps : nullptr);
    if (config_.prediction == Prediction::velocity) {
        if (t < 1 || t > static_cast<int>(alpha_bars_.size())) {
            throw StateError("velocity denoiser has no schedule entry for timestep " + std::to_string(t));
        }
        const double ab = alpha_bars_[t - 1];
        eps = std::sqrt(ab) * eps + std::sqrt(1.0 - ab) * x;
    }
    evaluations_->fetch_add(1);
    NoisePrediction out{eps[0].to(z_t.scalar_type()), std::nullopt};
    if (capture) {
        AttentionMaps m;
        for (const auto& s : maps) m.sites.push_back(s[0].reshape({-1, s.size(-1)}).to(z_t.scalar_type()));
        out.maps = std::move(m);
    }
    return out;
}

NoisePrediction Denoiser::predict_noise(const LatentClip& z_t, int t, const PromptEmbedding& embedding,
                                        bool capture) const {
    torch::NoGradGuard guard;
    return forward(z_t.data, t, embedding, capture);
}

torch::Tensor Denoiser::forward_batch(const torch::Tensor& x, const torch::Tensor& t, const ConditionBatch& cond,
                                      std::vector<torch::Tensor>* maps) const {
    if (!net_) throw StateError("denoiser has no weights");
    return net_->forward(x, t, cond, maps);
}

std::vector<torch::Tensor> Denoiser::parameters() const {
    if (!net_) return {};
    return net_->parameters();
}

std::vector<std::pair<std::string, torch::Tensor>> Denoiser::named_parameters() const {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    if (!net_) return out;
    for (const auto& item : net_->named_parameters()) out.emplace_back(item.key(), item.value());
    return out;
}

void Denoiser::load_parameters(const std::vector<std::pair<std::string, torch::Tensor>>& tensors) {
    if (!net_) throw StateError("denoiser has no weights to overwrite");
    std::unordered_map<std::string, torch::Tensor> by_name(tensors.begin(), tensors.end());
    torch::NoGradGuard guard;
    for (auto& item : net_->named_parameters()) {
        const auto it = by_name.find(item.key());
        if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + item.key() + "'");
        if (it->second.sizes() != item.value().sizes()) {
            throw FormatError("checkpoint tensor '" + item.key() + "' has the wrong shape");
        }
        item.value().copy_(it->second.to(item.value().scalar_type()));
    }
}

namespace {

double one_cycle(double peak, int step, int total, double warmup_fraction) {
    const double start = peak / 25.0;
    const double floor = start / 1e4;
    const int warm = std::max(1, static_cast<int>(warmup_fraction * total));
    if (step < warm) return start + (peak - start) * step / warm;
    const double p = static_cast<double>(step - warm) / std::max(1, total - warm);
    return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

}  // namespace

TrainResult train_toy_denoiser(const ToyDataset& dataset, const NoiseSchedule& schedule, const TextEncoder& encoder,
                               const DenoiserConfig& config, const TrainOptions& options) {
    if (dataset.items.empty()) throw ParameterError("training needs a non-empty dataset");
    if (options.epochs < 1 || options.batch_size < 1) throw ParameterError("epochs and batch size must be positive");
    if (!(options.learning_rate > 0.0) || !std::isfinite(options.learning_rate)) {
        throw ParameterError("learning rate must be positive and finite");
    }
    if (options.p_uncond < 0.0 || options.p_uncond > 1.0) throw ParameterError("p_uncond must lie in [0, 1]");
    if (options.threads > 0) torch::set_num_threads(options.threads);

    const auto N = static_cast<int64_t>(dataset.items.size());
    std::vector<torch::Tensor> xs;
    std::vector<PromptEmbedding> embeddings;
    std::unordered_map<std::string, PromptEmbedding> cache;
    for (const auto& item : dataset.items) {
        xs.push_back(item.spectrogram.to(torch::kFloat32));
        auto it = cache.find(item.caption);
        if (it == cache.end()) it = cache.emplace(item.caption, embed_prompt(item.caption, encoder)).first;
        embeddings.push_back(it->second);
    }
    const auto X = torch::stack(xs);
    if (X.size(1) != config.in_channels || X.size(2) != config.freq_bins || X.size(3) != config.time_frames) {
        throw ShapeError("dataset clips do not match the denoiser latent shape");
    }
    const auto cond = ConditionBatch::from(embeddings, torch::kFloat32);
    const auto uncond = ConditionBatch::from({embed_prompt(std::string_view{}, encoder)}, torch::kFloat32);
    const auto alpha_bars = torch::tensor(std::vector<double>(schedule.alpha_bars().begin(), schedule.alpha_bars().end()),
                                          torch::kFloat64);

    auto model = std::make_shared<Denoiser>(config, options.seed);
    auto ema = std::make_shared<Denoiser>(config, options.seed);
    model->to(torch::kFloat32);
    ema->to(torch::kFloat32);
    auto params = model->parameters();
    auto ema_params = ema->parameters();
    for (auto& p : ema_params) p.requires_grad_(false);

    torch::optim::AdamW optimizer(params, torch::optim::AdamWOptions(options.learning_rate).weight_decay(0.0));
    auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto f32 = torch::TensorOptions().dtype(torch::kFloat32);
    const int T = schedule.num_train_steps();
    const int per_epoch = static_cast<int>((N + options.batch_size - 1) / options.batch_size);
    const int total = per_epoch * options.epochs;

    TrainResult result;
    int step = 0;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        const auto order = torch::randperm(N, gen, torch::kLong);
        double sum = 0.0;
        int batches = 0;
        for (int64_t start = 0; start < N; start += options.batch_size) {
            const auto idx = order.slice(0, start, std::min(N, start + options.batch_size));
            const auto B = idx.size(0);
            const auto x = X.index_select(0, idx);
            const auto drop = torch::rand({B}, gen, f32) < options.p_uncond;
            ConditionBatch c{cond.sentence.index_select(0, idx), cond.sentence_mask.index_select(0, idx),
                             cond.sequence.index_select(0, idx)};
            c.sentence = torch::where(drop.view({B, 1, 1}), uncond.sentence, c.sentence);
            c.sentence_mask = torch::where(drop.view({B, 1}), uncond.sentence_mask, c.sentence_mask);
            c.sequence = torch::where(drop.view({B, 1, 1}), uncond.sequence, c.sequence);

            const auto t = torch::randint(1, T + 1, {B}, gen, torch::kLong);
            const auto noise = torch::randn(x.sizes(), gen, f32);
            const auto ab = alpha_bars.index_select(0, t - 1).to(torch::kFloat32).view({B, 1, 1, 1});
            const auto z = ab.sqrt() * x + (1 - ab).sqrt() * noise;

            for (auto& g : optimizer.param_groups()) {
                static_cast<torch::optim::AdamWOptions&>(g.options())
                    .lr(one_cycle(options.learning_rate, step, total, options.warmup_fraction));
            }
            const auto pred = model->forward_batch(z, t, c);
            const auto target =
                config.prediction == Prediction::velocity ? ab.sqrt() * noise - (1 - ab).sqrt() * x : noise;
            const auto loss = torch::mse_loss(pred, target);
            const double value = loss.item<double>();
            if (!std::isfinite(value)) {
                throw TrainingError("training loss became non-finite at step " + std::to_string(step), epoch - 1);
            }
            optimizer.zero_grad();
            loss.backward();
            optimizer.step();
            {
                torch::NoGradGuard guard;
                const double decay = std::min(options.ema_decay, (1.0 + step) / (10.0 + step));
                for (std::size_t i = 0; i < params.size(); ++i) {
                    ema_params[i].mul_(decay).add_(params[i].detach(), 1.0 - decay);
                }
            }
            sum += value;
            ++batches;
            ++step;
        }
        result.epoch_loss.push_back(sum / batches);
        if (options.on_epoch) options.on_epoch(epoch, result.epoch_loss.back());
    }
    ema->set_schedule(schedule);
    result.model = ema;
    result.steps = step;
    return result;
}

std::string schedule_options_to_json(const ScheduleOptions& o) {
    return json{{"num_train_steps", o.num_train_steps},
                {"beta_min", o.beta_min},
                {"beta_max", o.beta_max},
                {"spacing", o.spacing == BetaSpacing::linear ? "linear" : "scaled_linear"},
                {"num_inference_steps", o.num_inference_steps},
                {"eta", o.eta}}
        .dump();
}

ScheduleOptions schedule_options_from_json(std::string_view text) {
    ScheduleOptions o;
    try {
        const auto j = json::parse(text);
        o.num_train_steps = j.value("num_train_steps", o.num_train_steps);
        o.beta_min = j.value("beta_min", o.beta_min);
        o.beta_max = j.value("beta_max", o.beta_max);
        const auto spacing = j.value("spacing", std::string("linear"));
        if (spacing != "linear" && spacing != "scaled_linear") throw FormatError("unknown beta spacing " + spacing);
        o.spacing = spacing == "linear" ? BetaSpacing::linear : BetaSpacing::scaled_linear;
        o.num_inference_steps = j.value("num_inference_steps", o.num_inference_steps);
        o.eta = j.value("eta", o.eta);
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad schedule options: ") + e.what());
    }
    return o;
}

void save_model(const std::filesystem::path& path, const ModelBundle& bundle) {
    if (!bundle.denoiser || !bundle.denoiser->loaded()) throw StateError("no trained denoiser to save");
    Checkpoint ck;
    ck.config_json = json{{"schema", "magus.model"},
                          {"version", 1},
                          {"denoiser", json::parse(bundle.denoiser->config().to_json())},
                          {"encoder", json::parse(bundle.encoder.to_json())},
                          {"schedule", json::parse(schedule_options_to_json(bundle.schedule))},
                          {"x0_range", bundle.x0_range ? json{bundle.x0_range->first, bundle.x0_range->second}
                                                       : json(nullptr)}}
                         .dump();
    ck.tensors = bundle.denoiser->named_parameters();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_checkpoint(path, ck);
}

ModelBundle load_model(const std::filesystem::path& path) {
    const auto ck = read_checkpoint(path);
    json j;
    try {
        j = json::parse(ck.config_json);
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad model header: ") + e.what());
    }
    if (j.value("schema", "") != "magus.model") throw FormatError("not a magus model checkpoint");
    if (j.value("version", 0) != 1) throw FormatError("unsupported model version");
    ModelBundle bundle;
    bundle.denoiser = std::make_shared<Denoiser>(DenoiserConfig::from_json(j.at("denoiser").dump()));
    bundle.denoiser->load_parameters(ck.tensors);
    bundle.encoder = ToyEncoderConfig::from_json(j.at("encoder").dump());
    bundle.schedule = schedule_options_from_json(j.at("schedule").dump());
    bundle.denoiser->set_schedule(build_schedule(bundle.schedule));
    if (j.contains("x0_range") && j["x0_range"].is_array() && j["x0_range"].size() == 2) {
        bundle.x0_range = std::make_pair(j["x0_range"][0].get<double>(), j["x0_range"][1].get<double>());
    }
    return bundle;
}

}  // namespace magus
