#include <doctest.h>

#include <cmath>

#include "diffdenoise/bsn.hpp"
#include "diffdenoise/data.hpp"
#include "diffdenoise/error.hpp"
#include "diffdenoise/metrics.hpp"
#include "diffdenoise/noise.hpp"
#include "test_support.hpp"

using namespace diffdenoise;

namespace {

BsnConfig small_config(int b) {
  BsnConfig c;
  c.blind_spot_size = b;
  c.channels = 8;
  c.depth = 3;
  return c;
}

/// Gradient of one output pixel with respect to the whole input.
torch::Tensor output_gradient(BlindSpotNet& net, int size, int row, int col) {
  torch::manual_seed(17);
  auto x = torch::rand({1, 1, size, size}).requires_grad_(true);
  net->forward(x).index({0, 0, row, col}).backward();
  return x.grad().index({0, 0});
}

}  // namespace

TEST_SUITE("bsn") {
  TEST_CASE("default blind spot follows the correlation length") {
    CHECK(default_blind_spot_size(0.0) == 1);
    CHECK(default_blind_spot_size(0.5) == 5);
    CHECK(default_blind_spot_size(1.2) == 9);
    CHECK(small_config(5).effective_dilation() == 6);
    CHECK(small_config(5).head_kernel() == 7);
  }

  TEST_CASE("receptive field never reaches the blind spot at dilation b + 1") {
    for (int b : {1, 3, 5, 9}) {
      for (int depth : {0, 1, 4, 6}) {
        CAPTURE(b);
        CAPTURE(depth);
        CHECK_FALSE(blind_spot_leaks(b, b + 1, depth));
      }
    }
    // Head reach (b+1)/2 = 3; one step of dilation 4 lands at offset -1.
    CHECK(blind_spot_leaks(5, 4, 1));
    auto c = small_config(5);
    c.dilation = 4;
    CHECK_THROWS_AS(build_bsn(c), ConstructionError);
    c.dilation = 2;
    CHECK_THROWS_AS(build_bsn(c), ConstructionError);
  }

  TEST_CASE("receptive offsets of the bare head form the ring around the blind spot") {
    const auto ring = receptive_offsets(3, 4, 0);
    CHECK(ring.size() == 16);
    for (const auto& [dy, dx] : ring) CHECK(std::max(std::abs(dy), std::abs(dx)) == 2);
  }

  TEST_CASE("an output pixel has zero gradient on its own blind spot") {
    for (int b : {1, 5, 9}) {
      CAPTURE(b);
      auto net = instantiate_bsn(build_bsn(small_config(b)));
      const int size = 48, row = 24, col = 23;
      const auto g = output_gradient(net, size, row, col);
      const int half = b / 2;
      for (int dy = -half; dy <= half; ++dy) {
        for (int dx = -half; dx <= half; ++dx) CHECK(g.index({row + dy, col + dx}).item<float>() == 0.0F);
      }
      double ring = 0.0;
      for (int dx = -half - 1; dx <= half + 1; ++dx) ring += std::abs(g.index({row - half - 1, col + dx}).item<float>());
      CHECK(ring > 0.0);
    }
  }

  TEST_CASE("perturbing blind-spot pixels leaves the output pixel unchanged") {
    auto net = instantiate_bsn(build_bsn(small_config(5)));
    torch::NoGradGuard guard;
    torch::manual_seed(4);
    auto x = torch::rand({1, 1, 32, 32});
    const auto base = net->forward(x).index({0, 0, 16, 16}).item<float>();
    auto y = x.clone();
    y.index_put_({0, 0, torch::indexing::Slice(14, 19), torch::indexing::Slice(14, 19)}, 5.0);
    CHECK(net->forward(y).index({0, 0, 16, 16}).item<float>() == base);
    y.index_put_({0, 0, 13, 16}, 5.0);
    CHECK(net->forward(y).index({0, 0, 16, 16}).item<float>() != base);
  }

  TEST_CASE("denoising requires a trained model") {
    const auto m = build_bsn(small_config(1));
    CHECK_THROWS_AS(bsn_denoise(m, test_support::ramp(16, 16)), ConfigError);
  }

  TEST_CASE("self-supervised training lowers the loss and is deterministic") {
    const auto clean = generate_phantoms(6, 32, 2);
    std::vector<ImagePatch> noisy;
    NoiseSpec spec;
    spec.sigma = 0.1;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      spec.seed = i;
      noisy.push_back(add_noise(clean[i], spec));
    }
    auto c = small_config(1);
    c.train.epochs = 30;
    c.train.batch_size = 3;
    c.train.learning_rate = 3e-3;
    const auto trained = train_bsn(build_bsn(c), noisy, c);
    REQUIRE(trained.loss_history.size() == 30);
    CHECK(trained.loss_history.back() < trained.loss_history.front());
    CHECK(train_bsn(build_bsn(c), noisy, c).encode() == trained.encode());

    const auto x = bsn_denoise(trained, noisy[0]);
    CHECK(x.same_shape(noisy[0]));
    CHECK(x.all_finite());
    CHECK(psnr(clean[0], x) > psnr(clean[0], noisy[0]));
  }

  TEST_CASE("config serialization rejects unknown keys") {
    auto c = small_config(3);
    c.train.epochs = 7;
    nlohmann::json j = c;
    const auto back = j.get<BsnConfig>();
    CHECK(back.blind_spot_size == 3);
    CHECK(back.train.epochs == 7);
    j["widht"] = 4;
    CHECK_THROWS_AS(j.get<BsnConfig>(), ConfigError);
    c.blind_spot_size = 4;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}
