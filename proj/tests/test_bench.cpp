#include "testing.hpp"

#include <cmath>
#include <numbers>

#include "magus/bench.hpp"
#include "magus/error.hpp"

using namespace magus;

namespace {

const ToyTextEncoder& encoder() {
    static const ToyTextEncoder enc(ToyEncoderConfig::defaults());
    return enc;
}

// Student t with three degrees of freedom has a closed-form tail.
double upper_tail_df3(double t) {
    const double s = std::sqrt(3.0);
    return 0.5 - (t / (s * (1.0 + t * t / 3.0)) + std::atan(t / s)) / std::numbers::pi;
}

}  // namespace

TEST_CASE("default arms") {
    const auto arms = default_arms();
    REQUIRE(arms.size() == 3);
    CHECK(arms[0].id == "no_l2_no_delta");
    CHECK(arms[0].label == "Ours w/o L2 & Δ");
    CHECK_FALSE(arms[0].use_delta);
    CHECK_FALSE(arms[0].constraint);
    CHECK(arms[1].id == "no_l2");
    CHECK(arms[1].label == "Ours w/o L2");
    CHECK(arms[1].use_delta);
    CHECK_FALSE(arms[1].constraint);
    CHECK(arms[2].id == "full");
    CHECK(arms[2].label == "Ours (final)");
    CHECK(arms[2].use_delta);
    CHECK(arms[2].constraint);
}

TEST_CASE("pair parsing") {
    const auto p = parse_pair("timbreA:timbreB");
    CHECK(p.source == "timbreA");
    CHECK(p.target == "timbreB");
    CHECK_THROWS_AS(parse_pair("timbreA"), ParameterError);
    CHECK_THROWS_AS(parse_pair(":timbreB"), ParameterError);
    CHECK_THROWS_AS(parse_pair("timbreA:"), ParameterError);
}

TEST_CASE("one-sided paired t-test") {
    const std::vector<double> a{1.0, 2.5, 3.0, 6.0};
    const std::vector<double> b{0.0, 0.5, 0.0, 2.0};
    // differences 1, 2, 3, 4
    const auto r = paired_t_test(a, b);
    CHECK(r.n == 4);
    CHECK(r.mean_diff == doctest::Approx(2.5));
    const double t = 2.5 / (std::sqrt(5.0 / 3.0) / 2.0);
    CHECK(r.t_stat == doctest::Approx(t).epsilon(1e-12));
    CHECK(r.p_value == doctest::Approx(upper_tail_df3(t)).epsilon(1e-9));

    const auto flipped = paired_t_test(b, a);
    CHECK(flipped.p_value == doctest::Approx(1.0 - r.p_value).epsilon(1e-9));

    const std::vector<double> c{1.0, 1.0, 1.0};
    const std::vector<double> d{0.0, 0.0, 0.0};
    CHECK(paired_t_test(c, d).p_value == 0.0);
    CHECK(paired_t_test(d, c).p_value == 1.0);
    CHECK(paired_t_test(c, c).p_value == 1.0);

    CHECK_THROWS_AS(paired_t_test(std::span(a).first(3), b), ShapeError);
    CHECK_THROWS_AS(paired_t_test(std::span(a).first(1), std::span(b).first(1)), ParameterError);
}

TEST_CASE("untrained model is rejected by the quality gate") {
    Denoiser net(DenoiserConfig::for_encoder(encoder().dims()), 3);
    net.set_schedule(build_schedule(ScheduleOptions{}));
    const auto sched = build_schedule(ScheduleOptions{});
    const std::vector<TimbrePair> pairs{{"timbreA", "timbreB"}};
    BenchConfig cfg;
    cfg.num_inference_steps = 3;
    cfg.num_captions = 4;
    cfg.arms = {default_arms()[2]};
    CHECK_THROWS_AS(run_benchmark(net, sched, encoder(), pairs, 2, cfg), ModelQualityError);

    cfg.quality_gate = 0.0;
    const auto result = run_benchmark(net, sched, encoder(), pairs, 2, cfg);
    CHECK(result.report.rows.size() == 2);
    CHECK(result.target_accuracy.count("full") == 1);
    CHECK_FALSE(result.chroma_test.has_value());
    CHECK(result.report.config.at("pairs") == "timbreA:timbreB");
    CHECK(result.report.config.at("seeds") == "2");
    CHECK(result.report.config.at("steps") == "3");
    CHECK(result.report.config.at("arms") == "full=Ours (final)");

    CHECK_THROWS_AS(run_benchmark(net, sched, encoder(), pairs, 0, cfg), ParameterError);
    const std::vector<TimbrePair> bad{{"timbreA", "kazoo"}};
    CHECK_THROWS_AS(run_benchmark(net, sched, encoder(), bad, 1, cfg), ParameterError);
}
