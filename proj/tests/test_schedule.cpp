#include "testing.hpp"

#include <cmath>

#include <torch/torch.h>

#include "magus/error.hpp"
#include "magus/schedule.hpp"

using namespace magus;

namespace {

LatentClip scalar(double v) { return LatentClip(torch::full({1, 1, 1}, v, torch::kFloat64)); }
double value(const LatentClip& c) { return c.data.item<double>(); }
torch::Tensor s(double v) { return torch::full({1, 1, 1}, v, torch::kFloat64); }

}  // namespace

TEST_CASE("linear schedule basics") {
    const auto sched = build_schedule(ScheduleOptions{});
    CHECK(sched.num_train_steps() == 1000);
    CHECK(sched.alpha_bar(1) == doctest::Approx(0.9999).epsilon(1e-12));
    CHECK(sched.alpha_bar(0) == 1.0);
    CHECK(sched.num_inference_steps() == 100);
    const auto ts = sched.inference_timesteps();
    CHECK(ts.front() == 1000);
    CHECK(ts[0] - ts[1] == 10);
    CHECK(ts.back() == 10);
    for (int t = 2; t <= 1000; ++t) CHECK_LT(sched.alpha_bar(t), sched.alpha_bar(t - 1));
}

TEST_CASE("constant beta gives a geometric alpha_bar") {
    const double b = 0.01;
    const auto sched = build_schedule(50, b, b, BetaSpacing::linear, 10);
    for (int t : {1, 7, 50}) CHECK(sched.alpha_bar(t) == doctest::Approx(std::pow(1 - b, t)).epsilon(1e-12));
}

TEST_CASE("schedule options are validated") {
    ScheduleOptions o;
    o.beta_min = 0.03;
    CHECK_THROWS_AS(build_schedule(o), ParameterError);
    o = {};
    o.num_inference_steps = 0;
    CHECK_THROWS_AS(build_schedule(o), ParameterError);
    CHECK_THROWS_AS(evenly_spaced_timesteps(10, 11), ParameterError);
}

TEST_CASE("forward marginal, scalar case") {
    const auto sched = NoiseSchedule::from_alphas({0.25});
    CHECK(value(forward_diffuse(scalar(2.0), 1, s(1.0), sched)) == doctest::Approx(1.8660).epsilon(1e-4));
    CHECK(value(forward_diffuse(scalar(2.0), 1, s(1.0), NoiseSchedule::from_alphas({1.0}))) == 2.0);
}

TEST_CASE("forward marginal variance matches alpha_bar") {
    const auto sched = NoiseSchedule::from_alphas({0.5});
    torch::manual_seed(11);
    const auto noise = torch::randn({1, 100, 100}, torch::kFloat64);
    const auto z = forward_diffuse(LatentClip(torch::zeros({1, 100, 100}, torch::kFloat64)), 1, noise, sched);
    CHECK(z.data.var().item<double>() == doctest::Approx(0.5).epsilon(0.04));
}

TEST_CASE("ddpm step hand evaluation") {
    // alpha_2 = 0.96, alpha_bar_2 = 0.25
    const auto sched = NoiseSchedule::from_alphas({0.25 / 0.96, 0.96});
    const double expected = (1.0 - (0.04 / std::sqrt(0.75)) * 0.5) / std::sqrt(0.96);
    CHECK(expected == doctest::Approx(0.99702).epsilon(1e-4));
    CHECK(value(ddpm_step(scalar(1.0), s(0.5), 2, sched)) == doctest::Approx(expected).epsilon(1e-12));

    const auto identity = NoiseSchedule::from_alphas({1.0});
    CHECK(value(ddpm_step(scalar(0.7), s(0.3), 1, identity)) == 0.7);
}

TEST_CASE("ddpm step inverts a single forward step when sigma is zero") {
    // At t = 1 the marginal is the one-step form z_1 = sqrt(a) z_0 + sqrt(1 - a) eps.
    const double a = 0.8, z_prev = 0.37, eps = -1.3;
    const auto sched = NoiseSchedule::from_alphas({a});
    const double z_t = std::sqrt(a) * z_prev + std::sqrt(1 - a) * eps;
    CHECK(value(ddpm_step(scalar(z_t), s(eps), 1, sched)) == doctest::Approx(z_prev).epsilon(1e-6));
}

TEST_CASE("ddim step hand evaluation") {
    const auto sched = NoiseSchedule::from_alphas({0.64, 0.25 / 0.64});
    const double z0_pred = (1.0 - std::sqrt(0.75) * 0.5) / 0.5;
    CHECK(z0_pred == doctest::Approx(1.13397).epsilon(1e-5));
    const double expected = 0.8 * z0_pred + 0.6 * 0.5;
    CHECK(value(ddim_step(scalar(1.0), s(0.5), 2, 1, sched)) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(value(ddim_step(scalar(1.0), s(0.5), 2, 1, sched)) == doctest::Approx(1.2072).epsilon(1e-4));
}

TEST_CASE("ddim step is deterministic and a no-op between equal alpha_bars") {
    const auto sched = NoiseSchedule::from_alphas({0.5, 1.0});
    torch::manual_seed(2);
    const LatentClip z(torch::randn({1, 4, 4}, torch::kFloat64));
    const auto e = torch::randn({1, 4, 4}, torch::kFloat64);
    CHECK(torch::equal(ddim_step(z, e, 2, 1, sched).data, ddim_step(z, e, 2, 1, sched).data));
    CHECK(torch::allclose(ddim_step(z, e, 2, 1, sched).data, z.data, 0, 1e-15));
}

TEST_CASE("ddim inversion undoes a ddim step") {
    const auto sched = build_schedule(ScheduleOptions{});
    torch::manual_seed(5);
    const LatentClip z(torch::randn({1, 8, 8}, torch::kFloat64));
    const auto e = torch::randn({1, 8, 8}, torch::kFloat64);
    for (auto [t, tp] : {std::pair{1000, 990}, {500, 300}, {10, 0}}) {
        const auto back = ddim_invert_step(ddim_step(z, e, t, tp, sched), e, tp, t, sched);
        CHECK((back.data - z.data).abs().max().item<double>() < 1e-6);
    }

    const auto hand = NoiseSchedule::from_alphas({0.64, 0.25 / 0.64});
    CHECK(value(ddim_invert_step(scalar(1.2072), s(0.5), 1, 2, hand)) == doctest::Approx(1.0).epsilon(1e-4));

    const auto rescaled = ddim_invert_step(z, torch::zeros_like(z.data), 1, 2, hand);
    CHECK(torch::allclose(rescaled.data, z.data * std::sqrt(0.25 / 0.64), 0, 1e-14));
}

TEST_CASE("sampling kernels reject mismatched shapes") {
    const auto sched = NoiseSchedule::from_alphas({0.5});
    CHECK_THROWS_AS(ddim_step(scalar(1.0), torch::zeros({1, 2, 1}, torch::kFloat64), 1, 0, sched), ShapeError);
    CHECK_THROWS_AS(forward_diffuse(scalar(1.0), 2, s(0.0), sched), ParameterError);
}

TEST_CASE("respacing keeps the chain and changes the timesteps") {
    const auto sched = build_schedule(ScheduleOptions{});
    const auto fifty = sched.with_inference_steps(50);
    CHECK(fifty.num_inference_steps() == 50);
    CHECK(fifty.inference_timesteps()[1] == 980);
    CHECK(fifty.alpha_bar(123) == sched.alpha_bar(123));
    CHECK(fifty.previous_timestep(49) == 0);
}
