#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "magus/condition.hpp"
#include "magus/denoiser.hpp"
#include "magus/metrics.hpp"
#include "magus/schedule.hpp"
#include "magus/toybench.hpp"

namespace magus {

/// One ablation arm of the editing benchmark.
struct BenchArm {
    std::string id;
    std::string label;
    bool use_delta = true;
    bool constraint = true;
};

/// no_l2_no_delta ("Ours w/o L2 & Δ"), no_l2 ("Ours w/o L2"), full ("Ours (final)").
std::vector<BenchArm> default_arms();

struct TimbrePair {
    std::string source;
    std::string target;
};

/// "timbreA:timbreB" -> {timbreA, timbreB}.
TimbrePair parse_pair(const std::string& text);

struct BenchConfig {
    int num_inference_steps = 50;
    double alpha = 0.04;
    double guidance_scale = 1.0;
    int num_captions = 64;
    std::uint64_t caption_seed = 0;
    std::uint64_t seed_offset = 0;
    /// Minimum per-attribute probe accuracy of the reconstructions.
    double quality_gate = 0.8;
    std::vector<BenchArm> arms = default_arms();
    std::optional<std::pair<double, double>> x0_range;
    AttributeSpace space = AttributeSpace::defaults();
    CaptionBank bank = CaptionBank::defaults();
};

/// One-sided paired t-test of H1: mean(a - b) > 0.
struct PairedTest {
    int n = 0;
    double mean_diff = 0.0;
    double t_stat = 0.0;
    double p_value = 1.0;
};

PairedTest paired_t_test(std::span<const double> a, std::span<const double> b);

struct BenchResult {
    EvalReport report;
    double reconstruction_accuracy = 0.0;
    /// Fraction of edits whose probed timbre equals the target, per arm id.
    std::map<std::string, double> target_accuracy;
    /// Chroma of the full arm against the no_l2 arm, when both ran.
    std::optional<PairedTest> chroma_test;
};

BenchResult run_benchmark(const Denoiser& denoiser, const NoiseSchedule& schedule, const TextEncoder& encoder,
                          std::span<const TimbrePair> pairs, int n_seeds, const BenchConfig& config);

}  // namespace magus
