#include <doctest.h>

#include <cmath>

#include "diffdenoise/diffusion.hpp"
#include "diffdenoise/error.hpp"
#include "diffdenoise/rng.hpp"
#include "diffdenoise/srds.hpp"
#include "test_support.hpp"

using namespace diffdenoise;

namespace {

/// eps_hat = a * x_t / noise(t) + b * condition + c: affine in x_t at every step.
struct AffinePredictor : NoisePredictor {
  const DiffusionSchedule* schedule = nullptr;
  double a = 0.9, b = 0.2, c = 0.05;
  double scale = 1.0;
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor& condition,
                              const torch::Tensor& t) override {
    const double n = schedule->noise(static_cast<int>(t[0].item<std::int64_t>()));
    return (a / n) * x_t + b * condition + c;
  }
  double residual_scale() const override { return scale; }
};

/// Noise predictor that is exact for the residual r0 = 0: its chain maps every start to zero.
struct ZeroResidualPredictor : NoisePredictor {
  const DiffusionSchedule* schedule = nullptr;
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor&, const torch::Tensor& t) override {
    return x_t / schedule->noise(static_cast<int>(t[0].item<std::int64_t>()));
  }
};

/// A nonlinear predictor so that antithetic branches do not cancel exactly.
struct TanhPredictor : NoisePredictor {
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor& condition,
                              const torch::Tensor&) override {
    return torch::tanh(0.8 * x_t + condition);
  }
};

double max_abs_diff(const ImagePatch& a, const ImagePatch& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a.values()[i]) - b.values()[i]));
  return m;
}

TrainedModel tiny_trained_model() {
  DiffusionConfig c;
  c.timesteps = 50;
  c.unet = {8, 2};
  c.train.epochs = 2;
  c.train.batch_size = 2;
  std::vector<ImagePatch> noisy, cond;
  for (std::uint64_t i = 0; i < 2; ++i) {
    cond.push_back(test_support::ramp(16, 16));
    noisy.push_back(test_support::random_image(16, 16, i));
  }
  return train_diffusion(build_diffusion(c), noisy, cond, c);
}

}  // namespace

TEST_SUITE("srds") {
  const auto schedule = make_schedule(1000, 1e-4, 0.02);
  const auto noisy = test_support::random_image(16, 16, 1);
  const auto cond = test_support::random_image(16, 16, 2, 0.2F, 0.8F);

  TEST_CASE("mode names round-trip") {
    for (auto m : {SampleMode::srds, SampleMode::single, SampleMode::random_pair}) {
      CHECK(parse_sample_mode(to_string(m)) == m);
    }
    CHECK(to_string(SampleMode::random_pair) == "random-pair");
    CHECK_THROWS_AS(parse_sample_mode("pair"), ConfigError);
  }

  TEST_CASE("output is exactly the mean of its two branches") {
    TanhPredictor p;
    const auto r = srds_sample(p, noisy, cond, schedule, 10, 42);
    for (std::size_t i = 0; i < r.output.size(); ++i) {
      CHECK(r.output.values()[i] == (r.branch_pos.values()[i] + r.branch_neg.values()[i]) * 0.5F);
    }
    CHECK(r.eps_seed == 42);
    CHECK(branch_variance(r) > 0.0);
  }

  TEST_CASE("branches start from eps and -eps") {
    TanhPredictor p;
    const auto eps = draw_standard_normal(16, 16, 42);
    const auto r = srds_sample(p, noisy, cond, schedule, 10, 42);
    CHECK(r.branch_pos == sample_branch(p, noisy, cond, eps, schedule, 10));
    CHECK(r.branch_neg == sample_branch(p, noisy, cond, eps * -1.0F, schedule, 10));
    const auto swapped = srds_from_noise(p, noisy, cond, eps * -1.0F, schedule, 10);
    CHECK(swapped.output == r.output);
    CHECK(swapped.branch_pos == r.branch_neg);
  }

  TEST_CASE("single branch equals the positive branch") {
    TanhPredictor p;
    const auto r = srds_sample(p, noisy, cond, schedule, 8, 7);
    CHECK(single_branch_sample(p, noisy, cond, schedule, 8, 7) == r.branch_pos);
  }

  TEST_CASE("an exact zero-residual predictor returns the condition") {
    ZeroResidualPredictor p;
    p.schedule = &schedule;
    const auto r = srds_sample(p, noisy, cond, schedule, 20, 3);
    CHECK(max_abs_diff(r.output, cond) < 1e-5);
    CHECK(max_abs_diff(r.branch_pos, cond) < 1e-5);
  }

  TEST_CASE("an odd predictor gives branches mirrored about the condition") {
    AffinePredictor p;
    p.schedule = &schedule;
    p.b = 0.0;
    p.c = 0.0;
    const auto r = srds_sample(p, noisy, cond, schedule, 12, 9);
    for (std::size_t i = 0; i < cond.size(); ++i) {
      const double up = r.branch_pos.values()[i] - cond.values()[i];
      const double down = r.branch_neg.values()[i] - cond.values()[i];
      CHECK(up == doctest::Approx(-down).epsilon(1e-4).scale(1e-5));
    }
    CHECK(max_abs_diff(r.output, cond) < 1e-5);
  }

  TEST_CASE("for an affine predictor the antithetic mean equals the chain from zero noise") {
    AffinePredictor p;
    p.schedule = &schedule;
    p.scale = 4.0;
    const auto zero = sample_branch(p, noisy, cond, ImagePatch(16, 16), schedule, 25);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto r = srds_sample(p, noisy, cond, schedule, 25, seed);
      CHECK(max_abs_diff(r.output, zero) < 1e-4);
      CHECK(max_abs_diff(r.branch_pos, zero) > 1e-3);
    }
  }

  TEST_CASE("random pair is symmetric in its seeds and rejects equal seeds") {
    TanhPredictor p;
    const auto ab = random_pair_average(p, noisy, cond, schedule, 6, 1, 2);
    const auto ba = random_pair_average(p, noisy, cond, schedule, 6, 2, 1);
    CHECK(ab == ba);
    const auto a = single_branch_sample(p, noisy, cond, schedule, 6, 1);
    const auto b = single_branch_sample(p, noisy, cond, schedule, 6, 2);
    for (std::size_t i = 0; i < ab.size(); ++i) CHECK(ab.values()[i] == (a.values()[i] + b.values()[i]) * 0.5F);
    CHECK_THROWS_AS(random_pair_average(p, noisy, cond, schedule, 6, 5, 5), ConfigError);
  }

  TEST_CASE("shape and step errors") {
    TanhPredictor p;
    CHECK_THROWS_AS(srds_sample(p, noisy, ImagePatch(16, 20), schedule, 5, 1), ShapeError);
    CHECK_THROWS_AS(srds_sample(p, noisy, cond, schedule, 0, 1), ConfigError);
    CHECK_THROWS_AS(sample_branch(p, noisy, cond, ImagePatch(20, 16), schedule, 5), ShapeError);
  }

  TEST_CASE("non-finite chains are reported") {
    struct NanPredictor : NoisePredictor {
      torch::Tensor predict_noise(const torch::Tensor& x, const torch::Tensor&, const torch::Tensor&) override {
        return torch::full_like(x, std::nan(""));
      }
    } p;
    CHECK_THROWS_AS(srds_sample(p, noisy, cond, schedule, 5, 1), TrainingError);
  }

  TEST_CASE("sampler front end over a trained checkpoint") {
    const auto model = tiny_trained_model();
    DiffusionSampler sampler(model);
    const auto r = sampler.srds(noisy, cond, 5, 11);
    CHECK(sampler.sample(SampleMode::srds, noisy, cond, 5, 11) == r.output);
    CHECK(sampler.sample(SampleMode::single, noisy, cond, 5, 11) == r.branch_pos);
    CHECK(sampler.sample(SampleMode::random_pair, noisy, cond, 5, 11) ==
          sampler.random_pair(noisy, cond, 5, 11, derive_seed(11, "pair")));
    CHECK(sampler.srds(noisy, cond, 5, 11).output == r.output);

    auto untrained = build_diffusion(DiffusionConfig{});
    CHECK_THROWS_AS(DiffusionSampler{untrained}, ConfigError);
  }

  TEST_CASE("per-image eps seeds depend on seed and id") {
    CHECK(image_eps_seed(1, "p00001") == image_eps_seed(1, "p00001"));
    CHECK(image_eps_seed(1, "p00001") != image_eps_seed(1, "p00002"));
    CHECK(image_eps_seed(1, "p00001") != image_eps_seed(2, "p00001"));
  }
}
