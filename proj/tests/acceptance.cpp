// Acceptance runner: one PASS/FAIL line per criterion.
// usage: magus_acceptance <model.mgck>
#include <sys/wait.h>

#include <torch/torch.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <sstream>

#include "magus/bench.hpp"
#include "magus/tensor_io.hpp"
#include "trained_checks.hpp"

using namespace magus;
using namespace magus::checks;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

const ToyTextEncoder& default_encoder() {
    static const ToyTextEncoder enc(ToyEncoderConfig::defaults());
    return enc;
}

Verdict null_edit(const ToyModel& m) {
    int identical = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        EditRequest req;
        req.source_prompt = seeded_attributes(seed, "timbreA").caption();
        req.target_prompt = req.source_prompt;
        req.direction = timbre_direction(m, "timbreA", "timbreA");
        req.seed = seed;
        req.num_inference_steps = 100;
        const auto r = edit(req, m.denoiser(), m.schedule, *m.encoder);
        identical += torch::equal(r.edited.data, r.original.data);
    }
    std::ostringstream d;
    d << identical << "/10 seeds bit-identical at 100 steps";
    return {identical == 10, d.str()};
}

Verdict gradient_check() {
    auto c = DenoiserConfig::for_encoder(default_encoder().dims());
    c.freq_bins = 8;
    c.time_frames = 8;
    c.patch = 1;
    c.channels = {8, 8};
    c.groups = 4;
    c.attn_dim = 8;
    c.heads = 2;
    c.time_embed_dim = 8;
    Denoiser net(c, 1);
    net.to(torch::kFloat64);
    net.set_schedule(build_schedule(ScheduleOptions{}));
    {
        torch::NoGradGuard guard;
        auto g = at::detail::createCPUGenerator(101);
        for (auto& p : net.parameters()) p.add_(0.1 * torch::randn(p.sizes(), g, p.scalar_type()));
    }
    const auto E = embed_prompt("A relaxing jazz music with timbreA performance.", default_encoder());
    const auto E_edit = embed_prompt("A relaxing jazz music with timbreB performance.", default_encoder());
    auto g = at::detail::createCPUGenerator(77);
    std::mt19937 pick(5);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const int t = 1 + static_cast<int>(pick() % 1000);
        const auto z = torch::randn({1, 8, 8}, g, torch::kFloat64);
        const auto origin = *net.predict_noise(LatentClip(torch::randn({1, 8, 8}, g, torch::kFloat64)), t, E, true).maps;
        const auto lg = attention_loss_gradient(net, z, t, E_edit, origin);
        auto loss_at = [&](const torch::Tensor& x) {
            return attention_loss(*net.predict_noise(LatentClip(x), t, E_edit, true).maps, origin);
        };
        auto fd = torch::zeros_like(z);
        const double h = 1e-6;
        for (int64_t i = 0; i < z.numel(); ++i) {
            auto plus = z.clone();
            auto minus = z.clone();
            plus.view({-1})[i] += h;
            minus.view({-1})[i] -= h;
            fd.view({-1})[i] = (loss_at(plus) - loss_at(minus)) / (2 * h);
        }
        worst = std::max(worst, (lg.grad - fd).norm().item<double>() / fd.norm().item<double>());
    }
    std::ostringstream d;
    d << "max relative error " << worst << " over 5 timesteps";
    return {worst < 1e-3, d.str()};
}

Verdict round_trips(const ToyModel& m) {
    InversionConfig cfg;
    cfg.num_inference_steps = 50;
    double replay = 0.0;
    for (int c = 0; c < 10; ++c) {
        const auto clip = generate_clip(seeded_attributes(c, "timbreA"), c).clip;
        const auto inv = invert(clip, tokenize(seeded_attributes(c, "timbreA").caption()), cfg, m.denoiser(), m.schedule,
                                *m.encoder);
        const auto back = replay_inversion(inv.z_T, inv.trace, m.schedule.with_inference_steps(50));
        replay = std::max(replay, (back.data - clip.data).abs().max().item<double>());
    }
    const auto rt = inversion_round_trip(m, 10, 50);
    std::ostringstream d;
    d << "replay max error " << replay << ", trained round trip chroma min " << rt.min << " mean " << rt.mean;
    return {replay < 1e-5 && rt.min >= 0.99, d.str()};
}

Verdict bench_trend(const ToyModel& m) {
    const std::vector<TimbrePair> pairs{{"timbreA", "timbreB"}, {"timbreB", "timbreA"}, {"timbreA", "timbreC"}};
    BenchConfig cfg;
    cfg.x0_range = m.bundle.x0_range;
    const auto arms = default_arms();
    cfg.arms = {arms[1], arms[2]};
    const auto r = run_benchmark(m.denoiser(), m.schedule, *m.encoder, pairs, 20, cfg);
    const double chroma_full = r.report.groups.at("full").chroma;
    const double chroma_no_l2 = r.report.groups.at("no_l2").chroma;
    const double sem_full = r.report.groups.at("full").semantic;
    const double sem_no_l2 = r.report.groups.at("no_l2").semantic;
    const auto& test = *r.chroma_test;
    std::ostringstream d;
    d << "chroma full " << chroma_full << " vs no_l2 " << chroma_no_l2 << " (n " << test.n << ", p " << test.p_value
      << "), semantic full " << sem_full << " vs no_l2 " << sem_no_l2;
    return {test.n >= 60 && test.p_value < 0.05 && std::abs(sem_full - sem_no_l2) <= 0.10, d.str()};
}

Verdict row_sums(const ToyModel& m) {
    EditRequest req;
    req.source_prompt = "A relaxing jazz music with timbreA performance.";
    req.target_prompt = "A relaxing jazz music with timbreB performance.";
    req.direction = timbre_direction(m, "timbreA", "timbreB");
    req.num_inference_steps = 100;
    req.seed = 7;
    req.x0_range = m.bundle.x0_range;
    const double err = max_row_sum_error(m, req);
    std::ostringstream d;
    d << "max |row sum - 1| " << err << " over 100 steps, all sites, both chains";
    return {err < 1e-5, d.str()};
}

Verdict metric_contracts() {
    bool ok = true;
    double worst_energy = 0.0;
    for (int seed = 0; seed < 100; ++seed) {
        auto g = at::detail::createCPUGenerator(seed);
        const LatentClip clip(torch::randn({1, 32, 32}, g, torch::kFloat64));
        const auto chroma = chromagram(clip);
        worst_energy = std::max(
            worst_energy, (chroma.energy.sum(0) - clip.data.clamp_min(0).sum({0, 1})).abs().max().item<double>());
        ok &= std::abs(chroma_similarity(chroma, chroma) - 1.0) < 1e-12;
        ok &= std::abs(chroma_similarity(chroma, Chromagram{chroma.energy * 3.5}) - 1.0) < 1e-12;
    }
    auto x = torch::zeros({8, 4}, torch::kFloat64);
    auto y = torch::zeros({8, 4}, torch::kFloat64);
    x[1].fill_(1.0);
    y[2].fill_(1.0);
    ok &= chroma_similarity(Chromagram{x}, Chromagram{y}) == 0.0;
    std::ostringstream d;
    d << "identity/orthogonality/scale cases " << (ok ? "hold" : "fail") << ", energy error " << worst_energy;
    return {ok && worst_energy < 1e-6, d.str()};
}

Verdict schedule_scalars() {
    auto one = [](double v) { return LatentClip(torch::full({1, 1, 1}, v, torch::kFloat64)); };
    auto eps = [](double v) { return torch::full({1, 1, 1}, v, torch::kFloat64); };
    const double fwd = forward_diffuse(one(2.0), 1, eps(1.0), NoiseSchedule::from_alphas({0.25})).data.item<double>();
    const double ddim =
        ddim_step(one(1.0), eps(0.5), 2, 1, NoiseSchedule::from_alphas({0.64, 0.25 / 0.64})).data.item<double>();
    const double ddpm = ddpm_step(one(1.0), eps(0.5), 2, NoiseSchedule::from_alphas({0.25 / 0.96, 0.96})).data.item<double>();
    std::ostringstream d;
    d << "forward " << fwd << ", ddim " << ddim << ", ddpm " << ddpm;
    return {std::abs(fwd - 1.8660) < 1e-4 && std::abs(ddim - 1.2072) < 1e-4 && std::abs(ddpm - 0.99702) < 1e-4,
            d.str()};
}

Verdict timbre_transfer(const ToyModel& m) {
    const auto gen = generated_transfer(m, "timbreA", "timbreB", 20, 100, 0.04);
    const auto inv = inversion_transfer(m, "timbreA", "timbreB", 20, InversionConfig{}, 0.04);
    std::ostringstream d;
    d << "generated accuracy " << gen.target_accuracy << " with chroma >= 0.8 in " << gen.joint_rate
      << " (mean chroma " << gen.mean_chroma << "); inversion accuracy "
      << inv.target_accuracy << " mean chroma " << inv.mean_chroma;
    return {gen.joint_rate >= 0.8 && inv.target_accuracy >= 0.7 &&
                gen.target_accuracy >= inv.target_accuracy,
            d.str()};
}

int shell(const std::string& cmd) {
    const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Verdict cli_rerun(const std::string& model, const fs::path& work) {
    fs::remove_all(work);
    fs::create_directories(work);
    const std::string cli = MAGUS_CLI;
    const std::string prompt = "'A relaxing jazz music with timbreA performance.'";
    const fs::path clip = work / "clip.f32t";
    write_f32t(clip, generate_clip(Attributes{"relaxing", "jazz", "timbreA"}, 3).clip.data.to(torch::kFloat32));
    const std::vector<std::pair<std::string, std::string>> runs{
        {"generate", "generate --model " + model + " --prompt " + prompt + " --seed 4 --steps 25"},
        {"edit", "edit --model " + model + " --source " + prompt + " --target-keyword timbreB --seed 4 --steps 25"},
        {"invert-edit", "invert-edit --model " + model + " --input " + clip.string() + " --target-keyword timbreC --steps 25"},
        {"delta", "delta --source-keyword jazz --target-keyword rock"},
    };
    int files = 0;
    std::string failures;
    for (const auto& [name, args] : runs) {
        const auto first = work / name;
        const auto second = work / (name + "-rerun");
        if (shell(cli + " " + args + " --out " + first.string()) != 0 ||
            shell(cli + " --config " + (first / "config.ini").string() + " " + name + " --out " + second.string()) != 0) {
            failures += " " + name + "(exit)";
            continue;
        }
        for (const auto& entry : fs::directory_iterator(first)) {
            if (entry.path().extension() != ".f32t") continue;
            ++files;
            if (slurp(entry.path()) != slurp(second / entry.path().filename())) failures += " " + name + "/" + entry.path().filename().string();
        }
    }
    std::ostringstream d;
    d << files << " tensor outputs over " << runs.size() << " commands" << (failures.empty() ? ", all identical" : "; differ:" + failures);
    return {failures.empty() && files > 0, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: magus_acceptance <model.mgck> [work-dir]\n";
        return 2;
    }
    torch::set_num_threads(1);
    const std::string model_path = fs::absolute(argv[1]).string();
    const fs::path work = argc > 2 ? fs::path(argv[2]) : fs::temp_directory_path() / "magus_acceptance";
    const auto m = load_toy_model(model_path);

    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"null-edit identity", [&] { return null_edit(m); }},
        {"gradient correctness", [] { return gradient_check(); }},
        {"DDIM inverse round trip", [&] { return round_trips(m); }},
        {"L2 constraint chroma trend", [&] { return bench_trend(m); }},
        {"attention map stochasticity", [&] { return row_sums(m); }},
        {"metric contracts", [] { return metric_contracts(); }},
        {"schedule and sampler oracles", [] { return schedule_scalars(); }},
        {"end-to-end timbre transfer", [&] { return timbre_transfer(m); }},
        {"CLI rerun reproducibility", [&] { return cli_rerun(model_path, work); }},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        failed += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " " << (i + 1) << " " << criteria[i].first << ": " << v.detail
                  << std::endl;
    }
    return failed == 0 ? 0 : 1;
}
