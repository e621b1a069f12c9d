#include "diffdenoise/bsn.hpp"

#include <algorithm>
#include <set>

#include "diffdenoise/error.hpp"
#include "diffdenoise/hash.hpp"
#include "diffdenoise/rng.hpp"

namespace diffdenoise {

void BsnConfig::validate() const {
  if (blind_spot_size < 1 || blind_spot_size % 2 == 0) throw ConfigError("blind_spot_size must be an odd integer >= 1");
  if (channels < 1) throw ConfigError("bsn channels must be >= 1");
  if (depth < 0) throw ConfigError("bsn depth must be >= 0");
  if (dilation < 0) throw ConfigError("bsn dilation must be >= 0");
}

void to_json(nlohmann::json& j, const BsnConfig& c) {
  j = nlohmann::json{{"blind_spot_size", c.blind_spot_size}, {"channels", c.channels}, {"depth", c.depth},
                     {"dilation", c.dilation}, {"train", c.train}};
}

void from_json(const nlohmann::json& j, BsnConfig& c) {
  c = BsnConfig{};
  for (const auto& [key, value] : j.items()) {
    if (key == "blind_spot_size") c.blind_spot_size = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "depth") c.depth = value.get<int>();
    else if (key == "dilation") c.dilation = value.get<int>();
    else if (key == "train") {
      for (const auto& [tk, tv] : value.items()) {
        static const std::set<std::string> kKnown = {"epochs", "batch_size", "crop", "learning_rate",
                                                     "augment", "cosine_decay", "grad_clip", "seed"};
        if (kKnown.count(tk) == 0) throw ConfigError("unknown bsn.train key '" + tk + "'");
      }
      read_schedule(value, c.train);
    } else {
      throw ConfigError("unknown bsn key '" + key + "'");
    }
  }
  c.validate();
}

int default_blind_spot_size(double corr_sigma) {
  if (corr_sigma <= 0.0) return 1;
  if (corr_sigma <= 0.5) return 5;
  return 9;
}

std::vector<std::pair<int, int>> receptive_offsets(int blind_spot_size, int dilation, int depth) {
  const int half = blind_spot_size / 2;
  const int reach = half + 1;
  std::set<std::pair<int, int>> current;
  for (int dy = -reach; dy <= reach; ++dy) {
    for (int dx = -reach; dx <= reach; ++dx) {
      if (std::max(std::abs(dy), std::abs(dx)) == reach) current.insert({dy, dx});
    }
  }
  for (int layer = 0; layer < depth; ++layer) {
    std::set<std::pair<int, int>> next;
    for (const auto& [dy, dx] : current) {
      for (int ky = -1; ky <= 1; ++ky) {
        for (int kx = -1; kx <= 1; ++kx) next.insert({dy + ky * dilation, dx + kx * dilation});
      }
    }
    current = std::move(next);
  }
  return {current.begin(), current.end()};
}

bool blind_spot_leaks(int blind_spot_size, int dilation, int depth) {
  const int half = blind_spot_size / 2;
  for (const auto& [dy, dx] : receptive_offsets(blind_spot_size, dilation, depth)) {
    if (std::abs(dy) <= half && std::abs(dx) <= half) return true;
  }
  return false;
}

BlindSpotNetImpl::BlindSpotNetImpl(const BsnConfig& config) {
  config.validate();
  if (blind_spot_leaks(config.blind_spot_size, config.effective_dilation(), config.depth)) {
    throw ConstructionError("dilation " + std::to_string(config.effective_dilation()) + " with depth " +
                            std::to_string(config.depth) + " leaks into a " + std::to_string(config.blind_spot_size) +
                            "x" + std::to_string(config.blind_spot_size) + " blind spot");
  }
  const int k = config.head_kernel();
  const int c = config.channels;
  head_padding_ = k / 2;

  auto mask = torch::ones({1, 1, k, k});
  const int lo = 1;
  const int hi = k - 1;
  mask.index_put_({0, 0, torch::indexing::Slice(lo, hi), torch::indexing::Slice(lo, hi)}, 0.0);
  head_mask_ = register_buffer("head_mask", mask);

  // Kaiming-uniform scaled by the number of unmasked taps.
  const double fan_in = static_cast<double>(4 * (k - 1));
  const double bound = std::sqrt(6.0 / fan_in);
  head_weight_ = register_parameter("head_weight", torch::empty({c, 1, k, k}).uniform_(-bound, bound));
  head_bias_ = register_parameter("head_bias", torch::zeros({c}));

  const int d = config.effective_dilation();
  for (int i = 0; i < config.depth; ++i) {
    body_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 3).dilation(d).padding(d)));
  }
  register_module("body", body_);
  if (config.depth > 0) hidden_ = register_module("hidden", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, c, 1)));
  out_ = register_module("out", torch::nn::Conv2d(torch::nn::Conv2dOptions(c, 1, 1)));
}

torch::Tensor BlindSpotNetImpl::forward(const torch::Tensor& x) {
  namespace F = torch::nn::functional;
  auto h = F::conv2d(x, head_weight_ * head_mask_.to(head_weight_.dtype()),
                     F::Conv2dFuncOptions().bias(head_bias_).padding(head_padding_));
  h = torch::relu(h);
  for (const auto& layer : *body_) h = h + torch::relu(layer->as<torch::nn::Conv2d>()->forward(h));
  if (!hidden_.is_empty()) h = torch::relu(hidden_->forward(h));
  return out_->forward(h);
}

namespace {

nlohmann::json bsn_architecture(const BsnConfig& c) {
  return {{"kind", "blind_spot_net"},
          {"blind_spot_size", c.blind_spot_size},
          {"channels", c.channels},
          {"depth", c.depth},
          {"dilation", c.effective_dilation()}};
}

BsnConfig config_from_architecture(const nlohmann::json& a) {
  if (a.value("kind", "") != "blind_spot_net") throw FormatError("checkpoint is not a blind-spot network");
  BsnConfig c;
  c.blind_spot_size = a.at("blind_spot_size").get<int>();
  c.channels = a.at("channels").get<int>();
  c.depth = a.at("depth").get<int>();
  c.dilation = a.at("dilation").get<int>();
  return c;
}

}  // namespace

BlindSpotNet instantiate_bsn(const TrainedModel& model) {
  if (model.stage != ModelStage::bsn) throw ConfigError("model is not a BSN checkpoint");
  BlindSpotNet net(config_from_architecture(model.architecture));
  restore_state(*net, model.parameters);
  net->eval();
  return net;
}

TrainedModel build_bsn(const BsnConfig& config) {
  config.validate();
  torch::manual_seed(derive_seed(config.train.seed, "bsn-init"));
  BlindSpotNet net(config);
  TrainedModel m;
  m.stage = ModelStage::bsn;
  m.architecture = bsn_architecture(config);
  nlohmann::json fp = config;
  m.fingerprint = sha256_hex(fp.dump());
  m.parameters = capture_state(*net);
  return m;
}

TrainedModel train_bsn(const TrainedModel& model, const std::vector<ImagePatch>& noisy, const BsnConfig& config) {
  if (noisy.empty()) throw ConfigError("train_bsn: empty dataset");
  for (const auto& img : noisy) require_same_shape(img, noisy.front(), "train_bsn");
  auto net = instantiate_bsn(model);
  const auto data = stack_images(noisy);
  TrainedModel out = model;
  out.loss_history = fit(*net, data, config.train, [&](const torch::Tensor& batch, torch::Generator&) {
    return torch::mse_loss(net->forward(batch), batch);
  });
  out.parameters = capture_state(*net);
  nlohmann::json fp = config;
  out.fingerprint = sha256_hex(fp.dump() + model.content_hash());
  return out;
}

BsnDenoiser::BsnDenoiser(const TrainedModel& model) {
  if (!model.trained()) throw ConfigError("bsn_denoise: model handle is untrained");
  net_ = instantiate_bsn(model);
}

ImagePatch BsnDenoiser::denoise(const ImagePatch& noisy) {
  configure_torch_determinism();
  torch::NoGradGuard no_grad;
  auto out = to_image(net_->forward(to_tensor(noisy)));
  if (!out.all_finite()) throw TrainingError("BSN produced non-finite output");
  return out;
}

ImagePatch bsn_denoise(const TrainedModel& model, const ImagePatch& noisy) {
  BsnDenoiser d(model);
  return d.denoise(noisy);
}

}  // namespace diffdenoise
