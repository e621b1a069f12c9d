#include <doctest.h>

#include "diffdenoise/bsn.hpp"
#include "diffdenoise/data.hpp"
#include "diffdenoise/distill.hpp"
#include "diffdenoise/error.hpp"
#include "diffdenoise/noise.hpp"
#include "test_support.hpp"

using namespace diffdenoise;

namespace {

DistillConfig small_config() {
  DistillConfig c;
  c.layers = 3;
  c.channels = 8;
  c.train.epochs = 40;
  c.train.batch_size = 4;
  c.train.learning_rate = 2e-3;
  return c;
}

DistillDataset identity_dataset() {
  DistillDataset d;
  for (std::uint64_t i = 0; i < 8; ++i) d.noisy.push_back(test_support::random_image(16, 16, i));
  d.target = d.noisy;
  d.diffusion_hash = "h";
  return d;
}

IterationDataset tiny_iteration_data() {
  const auto clean = generate_phantoms(7, 32, 5);
  NoiseSpec spec;
  spec.sigma = 0.05;
  IterationDataset d;
  for (int i = 0; i < 7; ++i) {
    spec.seed = static_cast<std::uint64_t>(i);
    const auto noisy = add_noise(clean[static_cast<std::size_t>(i)], spec);
    if (i < 2) {
      d.train_noisy.push_back(noisy);
      d.train_ids.push_back(patch_id(i));
    } else {
      d.eval_noisy.push_back(noisy);
      d.eval_clean.push_back(clean[static_cast<std::size_t>(i)]);
      d.eval_ids.push_back(patch_id(i));
    }
  }
  return d;
}

IterationConfig tiny_iteration_config() {
  IterationConfig c;
  c.diffusion.timesteps = 50;
  c.diffusion.unet = {8, 2};
  c.diffusion.train.epochs = 1;
  c.diffusion.train.batch_size = 2;
  c.distill = small_config();
  c.distill.train.epochs = 1;
  c.steps = 3;
  c.seed = 9;
  return c;
}

TrainedModel tiny_bsn() {
  BsnConfig c;
  c.channels = 4;
  c.depth = 1;
  c.train.epochs = 1;
  c.train.batch_size = 2;
  std::vector<ImagePatch> noisy{test_support::random_image(32, 32, 1), test_support::random_image(32, 32, 2)};
  return train_bsn(build_bsn(c), noisy, c);
}

}  // namespace

TEST_SUITE("distill") {
  TEST_CASE("the restoration net starts near the identity") {
    torch::manual_seed(0);
    RestorationNet net(4, 8);
    const auto x = torch::rand({1, 1, 16, 16});
    const auto y = net->forward(x);
    CHECK(y.sizes() == x.sizes());
    CHECK((y - x).abs().max().item<float>() < 0.2F);
  }

  TEST_CASE("fitting the identity drives the L1 loss below 1e-3") {
    const auto m = train_distilled(identity_dataset(), small_config());
    REQUIRE(m.trained());
    CHECK(m.loss_history.back() < 1e-3);
    CHECK(m.architecture["iteration"] == 1);
    CHECK(m.architecture["diffusion_hash"] == "h");
    const auto x = test_support::random_image(16, 16, 50);
    const auto y = distilled_denoise(m, x);
    double err = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, double(std::abs(y.values()[i] - x.values()[i])));
    CHECK(err < 0.02);
  }

  TEST_CASE("training is deterministic and records provenance") {
    auto d = identity_dataset();
    d.eps_seeds = {1, 2, 3};
    auto c = small_config();
    c.train.epochs = 2;
    const auto a = train_distilled(d, c);
    CHECK(train_distilled(d, c).encode() == a.encode());
    d.diffusion_hash = "other";
    CHECK(train_distilled(d, c).fingerprint != a.fingerprint);
  }

  TEST_CASE("dataset validation") {
    DistillDataset d;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = identity_dataset();
    d.target.pop_back();
    CHECK_THROWS_AS(d.validate(), ShapeError);
    d = identity_dataset();
    d.target[2] = ImagePatch(16, 20);
    CHECK_THROWS_AS(d.validate(), ShapeError);
    d = identity_dataset();
    d.iteration = 0;
    CHECK_THROWS_AS(d.validate(), ConfigError);
  }

  TEST_CASE("loading rejects untrained or foreign checkpoints") {
    CHECK_THROWS_AS(Distiller{tiny_bsn()}, ConfigError);
    auto m = train_distilled(identity_dataset(), [] {
      auto c = small_config();
      c.train.epochs = 1;
      return c;
    }());
    m.loss_history.clear();
    CHECK_THROWS_AS(Distiller{m}, ConfigError);
  }

  TEST_CASE("iteration k requires the output of iteration k - 1") {
    const auto data = tiny_iteration_data();
    const auto config = tiny_iteration_config();
    const auto bsn_source = bsn_condition_source(tiny_bsn());
    CHECK(bsn_source.iteration == 0);
    CHECK_THROWS_AS(run_iteration(bsn_source, data, 2, config), ConfigError);

    const auto first = run_iteration(bsn_source, data, 1, config);
    CHECK(first.report.methods() == std::vector<std::string>{"noisy", "condition", "srds", "distilled"});
    CHECK(first.report.image_ids() == data.eval_ids);
    CHECK(first.distilled.architecture["iteration"] == 1);
    CHECK(first.distilled.architecture["diffusion_hash"] == first.diffusion.content_hash());

    const auto next_source = distilled_condition_source(first.distilled, 1);
    CHECK_THROWS_AS(run_iteration(next_source, data, 1, config), ConfigError);
    CHECK_THROWS_AS(run_iteration(next_source, data, 3, config), ConfigError);
    const auto second = run_iteration(next_source, data, 2, config);
    CHECK(second.distilled.architecture["iteration"] == 2);
    CHECK(second.report.psnr_of("condition") == first.report.psnr_of("distilled"));
    CHECK_THROWS_AS(distilled_condition_source(first.distilled, 0), ConfigError);
  }

  TEST_CASE("config serialization rejects unknown keys") {
    nlohmann::json j = small_config();
    CHECK(j.get<DistillConfig>().layers == 3);
    j["dropout"] = 0.1;
    CHECK_THROWS_AS(j.get<DistillConfig>(), ConfigError);
    CHECK_THROWS_AS((nlohmann::json{{"layers", 1}}.get<DistillConfig>()), ConfigError);
  }
}
