#include "testing.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "magus/condition.hpp"
#include "magus/denoiser.hpp"
#include "magus/editor.hpp"
#include "magus/error.hpp"
#include "magus/inversion.hpp"
#include "magus/toybench.hpp"

using namespace magus;
namespace fs = std::filesystem;

namespace {

const ToyTextEncoder& encoder() {
    static const ToyTextEncoder enc(ToyEncoderConfig::defaults());
    return enc;
}

Denoiser tiny_denoiser(std::uint64_t seed, double output_scale = 1.0) {
    auto c = DenoiserConfig::for_encoder(encoder().dims());
    c.freq_bins = 8;
    c.time_frames = 8;
    c.patch = 1;
    c.channels = {8, 8};
    c.groups = 4;
    c.attn_dim = 8;
    c.heads = 2;
    c.time_embed_dim = 8;
    Denoiser net(c, seed);
    net.to(torch::kFloat64);
    net.set_schedule(build_schedule(ScheduleOptions{}));
    torch::NoGradGuard guard;
    auto g = at::detail::createCPUGenerator(seed + 100);
    for (auto& [name, p] : net.named_parameters()) {
        p.add_(0.1 * torch::randn(p.sizes(), g, p.scalar_type()));
        if (name.rfind("output.", 0) == 0) p.mul_(output_scale);
    }
    return net;
}

struct FixedCaptioner final : Captioner {
    std::string text;
    explicit FixedCaptioner(std::string t) : text(std::move(t)) {}
    std::string caption(const LatentClip&) const override { return text; }
};

fs::path script(const std::string& name, const std::string& body) {
    const auto path = fs::temp_directory_path() / name;
    std::ofstream(path) << "#!/bin/sh\n" << body << "\n";
    fs::permissions(path, fs::perms::owner_all);
    return path;
}

const std::vector<std::string> kCaption = tokenize("A relaxing jazz music with timbreA performance.");

}  // namespace

TEST_CASE("inversion config defaults and validation") {
    const InversionConfig c;
    CHECK(c.guidance_scale == 1.0);
    CHECK(c.autocorr_iters == 0);
    InversionConfig bad;
    bad.num_inference_steps = 0;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
    bad = {};
    bad.autocorr_weight = -1;
    CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("replaying the recorded noise undoes the inversion") {
    const auto net = tiny_denoiser(1);
    const auto sched = build_schedule(ScheduleOptions{});
    InversionConfig cfg;
    cfg.num_inference_steps = 50;
    auto g = at::detail::createCPUGenerator(3);
    for (int i = 0; i < 3; ++i) {
        const LatentClip z0(torch::rand({1, 8, 8}, g, torch::kFloat64));
        const auto inv = invert(z0, kCaption, cfg, net, sched, encoder());
        CHECK(inv.trace.eps.size() == 50);
        CHECK(inv.trace.timesteps.front() == 20);
        CHECK(inv.trace.timesteps.back() == 1000);
        CHECK_FALSE(inv.trace.high_guidance);
        const auto back = replay_inversion(inv.z_T, inv.trace, sched.with_inference_steps(50));
        CHECK((back.data - z0.data).abs().max().item<double>() < 1e-5);
    }
}

TEST_CASE("inverting a sampler output recovers its starting noise") {
    const auto net = tiny_denoiser(2);
    const auto sched = build_schedule(ScheduleOptions{}).with_inference_steps(50);
    const SamplingContext ctx{net, sched, nullptr, std::nullopt};
    const auto E = embed_prompt(kCaption, encoder());
    const LatentClip z_T(initial_noise(net.config(), 4));
    const auto sample = reconstruct_and_record(z_T, E, ctx);
    InversionConfig cfg;
    cfg.num_inference_steps = 50;
    cfg.refine_iters = 8;
    const auto inv = invert(sample.z0, kCaption, cfg, net, sched, encoder());
    const double rel = (inv.z_T.data - z_T.data).norm().item<double>() / z_T.data.norm().item<double>();
    CHECK(rel < 1e-3);
}

TEST_CASE("high guidance is flagged and divergence is reported") {
    const auto net = tiny_denoiser(3);
    const auto sched = build_schedule(ScheduleOptions{});
    InversionConfig cfg;
    cfg.num_inference_steps = 5;
    cfg.guidance_scale = 3.0;
    const LatentClip z0(torch::rand({1, 8, 8}, torch::kFloat64));
    CHECK(invert(z0, kCaption, cfg, net, sched, encoder()).trace.high_guidance);

    const auto wild = tiny_denoiser(3, 1e9);
    CHECK_THROWS_AS(invert(z0, kCaption, InversionConfig{}, wild, sched, encoder()), InversionError);
}

TEST_CASE("autocorrelation regularizer") {
    InversionConfig off;
    const LatentClip x(torch::randn({1, 16, 16}, torch::kFloat64));
    CHECK(torch::equal(autocorr_regularize(x, off).data, x.data));

    InversionConfig on;
    on.autocorr_weight = 1.0;
    on.autocorr_iters = 1;
    const LatentClip constant(torch::full({1, 16, 16}, 0.7, torch::kFloat64));
    const double before = autocorr_penalty(constant.data).item<double>();
    const double after = autocorr_penalty(autocorr_regularize(constant, on).data).item<double>();
    CHECK(after < before);

    // iid N(0, 1): each of the 8 lag terms and the mean term has expectation 1/n,
    // the variance term 2/n.
    const int64_t n = 10000;
    const double expected = 11.0 / n;
    auto g = at::detail::createCPUGenerator(21);
    std::vector<double> draws;
    for (int i = 0; i < 200; ++i) {
        draws.push_back(autocorr_penalty(torch::randn({1, 100, 100}, g, torch::kFloat64)).item<double>());
    }
    double mean = 0, var = 0;
    for (double d : draws) mean += d;
    mean /= draws.size();
    for (double d : draws) var += (d - mean) * (d - mean);
    const double sd = std::sqrt(var / (draws.size() - 1));
    CHECK(std::abs(mean - expected) < 3 * sd / std::sqrt(200.0));

    const LatentClip noise(torch::randn({1, 100, 100}, g, torch::kFloat64));
    const double r = autocorr_penalty(noise.data).item<double>();
    CHECK(std::abs(r - expected) < 3 * sd);
    InversionConfig mild;
    mild.autocorr_weight = 1.0;
    mild.autocorr_iters = 5;
    const auto moved = autocorr_regularize(noise, mild).data;
    CHECK((moved - noise.data).norm().item<double>() < 0.01 * noise.data.norm().item<double>());
}

TEST_CASE("command captioner runs an external program") {
    const LatentClip clip(torch::zeros({1, 8, 8}, torch::kFloat64));
    const auto ok = script("magus_cap_ok.sh", "test -s \"$1\" && echo 'A rock song' && echo ignored");
    CHECK(CommandCaptioner(ok.string(), std::chrono::seconds(10)).caption(clip) == "A rock song");
    const auto fail = script("magus_cap_fail.sh", "exit 3");
    CHECK_THROWS_AS(CommandCaptioner(fail.string(), std::chrono::seconds(10)).caption(clip), Error);
    const auto slow = script("magus_cap_slow.sh", "sleep 5");
    try {
        CommandCaptioner(slow.string(), std::chrono::seconds(1)).caption(clip);
        FAIL("timeout not reported");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("timed out") != std::string::npos);
    }
    CHECK_THROWS_AS(caption_for_clip(clip, nullptr), ConfigurationError);
    const FixedCaptioner fixed("A Rock song.");
    CHECK((caption_for_clip(clip, &fixed) == std::vector<std::string>{"a", "rock", "song"}));
}

TEST_CASE("real-clip edit pipeline") {
    const auto net = tiny_denoiser(5);
    const auto sched = build_schedule(ScheduleOptions{});
    const FixedCaptioner captioner("A relaxing jazz music with timbreA performance.");
    const LatentClip clip(torch::rand({1, 8, 8}, torch::kFloat64));

    RealEditRequest req;
    req.target_keyword = "timbreB";
    req.inversion.num_inference_steps = 10;
    const auto bank = CaptionBank::defaults();
    req.direction = compute_delta(synthesize_captions("timbreA", bank, 8, 0), synthesize_captions("timbreB", bank, 8, 0),
                                  encoder());
    const auto result = edit_real(clip, req, net, sched, encoder(), &captioner);
    CHECK(result.target_prompt == "A relaxing jazz music with timbreB performance.");
    CHECK(result.steps.size() == 10);
    CHECK(result.edited.data.sizes() == clip.data.sizes());
    CHECK(torch::isfinite(result.edited.data).all().item<bool>());

    // Identity edit: same keyword, zero direction.
    RealEditRequest same = req;
    same.target_keyword = "timbreA";
    same.direction->delta.zero_();
    const auto identity = edit_real(clip, same, net, sched, encoder(), &captioner);
    CHECK(torch::equal(identity.edited.data, identity.reconstruction.data));

    CHECK_THROWS_AS(edit_real(clip, req, net, sched, encoder(), nullptr), ConfigurationError);
    RealEditRequest no_dir = req;
    no_dir.direction.reset();
    CHECK_THROWS_AS(edit_real(clip, no_dir, net, sched, encoder(), &captioner), ParameterError);
    RealEditRequest unknown = req;
    unknown.target_keyword = "tuba";
    CHECK_THROWS_AS(edit_real(clip, unknown, net, sched, encoder(), &captioner), ParameterError);
}

TEST_CASE("toy captions are always encodable") {
    const ToyCaptioner captioner;
    const auto space = AttributeSpace::defaults();
    const auto all = space.all();
    for (int i = 0; i < 100; ++i) {
        const auto& attr = all[i % all.size()];
        const auto clip = generate_clip(attr, i).clip;
        const auto tokens = caption_for_clip(clip, &captioner);
        CHECK(captioner.caption(clip) == attr.caption());
        const auto E = embed_prompt(tokens, encoder());
        CHECK(E.num_valid() > 0);
    }
}
