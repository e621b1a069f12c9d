#include "diffdenoise/diffusion.hpp"

#include <cmath>
#include <set>

#include "diffdenoise/hash.hpp"
#include "diffdenoise/rng.hpp"

namespace diffdenoise {

DiffusionSchedule make_schedule(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 2) throw ConfigError("diffusion timesteps must be >= 2");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw ConfigError("beta endpoints must satisfy 0 < beta_start < beta_end < 1");
  }
  DiffusionSchedule s;
  s.timesteps = timesteps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.alpha_bar.resize(static_cast<std::size_t>(timesteps) + 1);
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= timesteps; ++t) {
    const double beta = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (timesteps - 1);
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t - 1)] * (1.0 - beta);
  }
  return s;
}

std::vector<int> ddim_timesteps(int timesteps, int steps) {
  if (steps < 1) throw ConfigError("sampling steps must be >= 1");
  if (steps > timesteps) throw ConfigError("sampling steps exceed diffusion timesteps");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(steps) + 1);
  for (int i = steps; i >= 0; --i) {
    out.push_back(static_cast<int>(std::llround(static_cast<double>(i) * timesteps / steps)));
  }
  return out;
}

ResidualTarget::ResidualTarget(const ImagePatch& noisy, const ImagePatch& condition)
    : height_(noisy.height()), width_(noisy.width()) {
  require_same_shape(noisy, condition, "residual");
  r_.resize(noisy.size());
  auto a = noisy.values();
  auto b = condition.values();
  for (std::size_t i = 0; i < r_.size(); ++i) r_[i] = static_cast<double>(a[i]) - static_cast<double>(b[i]);
}

ImagePatch ResidualTarget::reconstruct(const ImagePatch& condition) const {
  if (condition.height() != height_ || condition.width() != width_) throw ShapeError("reconstruct: shape mismatch");
  ImagePatch out(height_, width_);
  auto o = out.values();
  auto c = condition.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(r_[i] + static_cast<double>(c[i]));
  return out;
}

torch::Tensor ResidualTarget::tensor(torch::ScalarType dtype) const {
  auto t = torch::empty({1, 1, height_, width_}, torch::kFloat64);
  std::copy(r_.begin(), r_.end(), t.data_ptr<double>());
  return t.to(dtype);
}

DiffusionState forward_diffuse(const torch::Tensor& residual, int t, const torch::Tensor& eps,
                               const torch::Tensor& condition, const DiffusionSchedule& schedule) {
  if (t < 0 || t > schedule.timesteps) throw ConfigError("timestep out of range");
  if (residual.sizes() != eps.sizes()) throw ShapeError("forward_diffuse: residual and eps differ in shape");
  if (condition.defined() && condition.sizes() != residual.sizes()) {
    throw ShapeError("forward_diffuse: condition shape differs");
  }
  DiffusionState state;
  state.t = t;
  state.condition = condition;
  state.x_t = t == 0 ? residual.clone() : residual * schedule.signal(t) + eps * schedule.noise(t);
  return state;
}

DiffusionState forward_diffuse(const ResidualTarget& residual, int t, const ImagePatch& eps,
                               const ImagePatch& condition, const DiffusionSchedule& schedule) {
  if (eps.height() != residual.height() || eps.width() != residual.width()) {
    throw ShapeError("forward_diffuse: eps shape differs from residual");
  }
  return forward_diffuse(residual.tensor(), t, to_tensor(eps), to_tensor(condition), schedule);
}

torch::Tensor q_sample(const torch::Tensor& residual, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule) {
  auto table = torch::tensor(schedule.alpha_bar, torch::kFloat64).to(residual.dtype());
  auto abar = table.index_select(0, t).view({-1, 1, 1, 1});
  return torch::sqrt(abar) * residual + torch::sqrt(1.0 - abar) * eps;
}

torch::Tensor diffusion_loss(NoisePredictor& predictor, const torch::Tensor& noisy, const torch::Tensor& condition,
                             const DiffusionSchedule& schedule, torch::Generator& gen) {
  if (noisy.sizes() != condition.sizes()) throw ShapeError("diffusion_loss: noisy and condition differ in shape");
  const auto batch = noisy.size(0);
  auto residual = (noisy - condition) * predictor.residual_scale();
  auto t = torch::randint(1, schedule.timesteps + 1, {batch}, gen, torch::TensorOptions().dtype(torch::kInt64));
  auto eps = torch::randn(noisy.sizes(), gen, noisy.options());
  auto x_t = q_sample(residual, t, eps, schedule);
  auto predicted = predictor.predict_noise(x_t, condition, t);
  return torch::mean(torch::abs(predicted - eps));
}

DiffusionState ddim_step(NoisePredictor& predictor, const DiffusionState& state, int t_next,
                         const DiffusionSchedule& schedule) {
  if (t_next >= state.t) throw ConfigError("ddim_step requires t_next < t");
  if (t_next < 0) throw ConfigError("ddim_step: t_next must be >= 0");
  auto t = torch::full({state.x_t.size(0)}, state.t, torch::TensorOptions().dtype(torch::kInt64));
  auto eps_hat = predictor.predict_noise(state.x_t, state.condition, t);
  auto x0_hat = (state.x_t - schedule.noise(state.t) * eps_hat) / schedule.signal(state.t);
  DiffusionState next;
  next.t = t_next;
  next.condition = state.condition;
  next.x_t = t_next == 0 ? x0_hat : schedule.signal(t_next) * x0_hat + schedule.noise(t_next) * eps_hat;
  return next;
}

torch::Tensor reverse_chain(NoisePredictor& predictor, const torch::Tensor& x_start, const torch::Tensor& condition,
                            const std::vector<int>& timesteps, const DiffusionSchedule& schedule) {
  if (timesteps.size() < 2) throw ConfigError("reverse chain needs at least two timesteps");
  torch::NoGradGuard no_grad;
  DiffusionState state{x_start, timesteps.front(), condition};
  for (std::size_t i = 1; i < timesteps.size(); ++i) state = ddim_step(predictor, state, timesteps[i], schedule);
  return state.x_t;
}

void UNetConfig::validate() const {
  if (base_channels < 8 || base_channels % 8 != 0) throw ConfigError("unet base_channels must be a multiple of 8");
  if (levels < 1 || levels > 5) throw ConfigError("unet levels must be in [1, 5]");
}

void DiffusionConfig::validate() const {
  make_schedule(timesteps, beta_start, beta_end);
  if (!(residual_scale > 0.0)) throw ConfigError("residual_scale must be > 0");
  unet.validate();
}

void to_json(nlohmann::json& j, const DiffusionConfig& c) {
  j = nlohmann::json{{"timesteps", c.timesteps},
                     {"beta_start", c.beta_start},
                     {"beta_end", c.beta_end},
                     {"residual_scale", c.residual_scale},
                     {"base_channels", c.unet.base_channels},
                     {"levels", c.unet.levels},
                     {"train", c.train}};
}

void from_json(const nlohmann::json& j, DiffusionConfig& c) {
  c = DiffusionConfig{};
  static const std::set<std::string> kTrainKeys = {"epochs", "batch_size", "crop", "learning_rate",
                                                   "augment", "cosine_decay", "grad_clip", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (key == "timesteps") c.timesteps = value.get<int>();
    else if (key == "beta_start") c.beta_start = value.get<double>();
    else if (key == "beta_end") c.beta_end = value.get<double>();
    else if (key == "residual_scale") c.residual_scale = value.get<double>();
    else if (key == "base_channels") c.unet.base_channels = value.get<int>();
    else if (key == "levels") c.unet.levels = value.get<int>();
    else if (key == "train") {
      for (const auto& [tk, tv] : value.items()) {
        if (kTrainKeys.count(tk) == 0) throw ConfigError("unknown diffusion.train key '" + tk + "'");
      }
      read_schedule(value, c.train);
    } else {
      throw ConfigError("unknown diffusion key '" + key + "'");
    }
  }
  c.validate();
}

namespace {

int groups_for(int channels) { return channels % 8 == 0 ? 8 : 1; }

}  // namespace

ResBlockImpl::ResBlockImpl(int in_channels, int out_channels, int embed_dim) {
  norm1_ = register_module("norm1", torch::nn::GroupNorm(groups_for(in_channels), in_channels));
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  embed_ = register_module("embed", torch::nn::Linear(embed_dim, out_channels));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(groups_for(out_channels), out_channels));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) {
    skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& embedding) {
  auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
  h = h + embed_->forward(embedding).unsqueeze(-1).unsqueeze(-1);
  h = conv2_->forward(torch::silu(norm2_->forward(h)));
  return h + (skip_.is_empty() ? x : skip_->forward(x));
}

namespace {

int level_channels(int base, int level) { return level == 0 ? base : 2 * base; }

}  // namespace

ConditionalUNetImpl::ConditionalUNetImpl(const UNetConfig& config) : base_(config.base_channels), levels_(config.levels) {
  config.validate();
  const int embed = 4 * base_;
  time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(base_, embed), torch::nn::SiLU(),
                                                                 torch::nn::Linear(embed, embed)));
  conv_in_ = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(2, base_, 3).padding(1)));
  for (int l = 0; l < levels_; ++l) {
    const int in = l == 0 ? base_ : level_channels(base_, l - 1);
    down_->push_back(ResBlock(in, level_channels(base_, l), embed));
  }
  register_module("down", down_);
  const int deepest = level_channels(base_, levels_ - 1);
  mid_ = register_module("mid", ResBlock(deepest, deepest, embed));
  for (int l = 0; l < levels_; ++l) {
    const int from_below = l == levels_ - 1 ? deepest : level_channels(base_, l + 1);
    up_->push_back(ResBlock(from_below + level_channels(base_, l), level_channels(base_, l), embed));
  }
  register_module("up", up_);
  norm_out_ = register_module("norm_out", torch::nn::GroupNorm(groups_for(base_), base_));
  conv_out_ = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(base_, 1, 3).padding(1)));
  torch::NoGradGuard no_grad;
  conv_out_->weight.zero_();
  conv_out_->bias.zero_();
}

torch::Tensor ConditionalUNetImpl::timestep_features(const torch::Tensor& t) const {
  const int half = base_ / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / half);
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1).to(conv_in_->weight.dtype());
}

torch::Tensor ConditionalUNetImpl::forward(const torch::Tensor& x_t, const torch::Tensor& condition,
                                           const torch::Tensor& t) {
  const auto divisor = 1LL << (levels_ - 1);
  if (x_t.size(2) % divisor != 0 || x_t.size(3) % divisor != 0) {
    throw ShapeError("unet input sides must be divisible by " + std::to_string(divisor));
  }
  auto emb = time_mlp_->forward(timestep_features(t));
  auto h = conv_in_->forward(torch::cat({x_t, condition}, 1));
  std::vector<torch::Tensor> skips;
  for (int l = 0; l < levels_; ++l) {
    h = down_[static_cast<std::size_t>(l)]->as<ResBlock>()->forward(h, emb);
    skips.push_back(h);
    if (l < levels_ - 1) h = torch::avg_pool2d(h, 2);
  }
  h = mid_->forward(h, emb);
  for (int l = levels_ - 1; l >= 0; --l) {
    if (l < levels_ - 1) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    }
    h = up_[static_cast<std::size_t>(l)]->as<ResBlock>()->forward(torch::cat({h, skips[static_cast<std::size_t>(l)]}, 1), emb);
  }
  return conv_out_->forward(torch::silu(norm_out_->forward(h)));
}

namespace {

nlohmann::json diffusion_architecture(const DiffusionConfig& c) {
  return {{"kind", "conditional_unet"}, {"base_channels", c.unet.base_channels}, {"levels", c.unet.levels},
          {"timesteps", c.timesteps},   {"beta_start", c.beta_start},            {"beta_end", c.beta_end},
          {"residual_scale", c.residual_scale}};
}

}  // namespace

DiffusionModel::DiffusionModel(const TrainedModel& model) {
  if (model.stage != ModelStage::diffusion) throw ConfigError("model is not a diffusion checkpoint");
  const auto& a = model.architecture;
  if (a.value("kind", "") != "conditional_unet") throw FormatError("unexpected diffusion architecture");
  UNetConfig u{a.at("base_channels").get<int>(), a.at("levels").get<int>()};
  net_ = ConditionalUNet(u);
  restore_state(*net_, model.parameters);
  net_->eval();
  schedule_ = make_schedule(a.at("timesteps").get<int>(), a.at("beta_start").get<double>(), a.at("beta_end").get<double>());
  residual_scale_ = a.at("residual_scale").get<double>();
}

torch::Tensor DiffusionModel::predict_noise(const torch::Tensor& x_t, const torch::Tensor& condition,
                                            const torch::Tensor& t) {
  return net_->forward(x_t, condition, t);
}

TrainedModel build_diffusion(const DiffusionConfig& config) {
  config.validate();
  torch::manual_seed(derive_seed(config.train.seed, "unet-init"));
  ConditionalUNet net(config.unet);
  TrainedModel m;
  m.stage = ModelStage::diffusion;
  m.architecture = diffusion_architecture(config);
  nlohmann::json fp = config;
  m.fingerprint = sha256_hex(fp.dump());
  m.parameters = capture_state(*net);
  return m;
}

TrainedModel train_diffusion(const TrainedModel& model, const std::vector<ImagePatch>& noisy,
                             const std::vector<ImagePatch>& conditions, const DiffusionConfig& config) {
  if (noisy.empty()) throw ConfigError("train_diffusion: empty dataset");
  if (noisy.size() != conditions.size()) throw ShapeError("train_diffusion: noisy/condition counts differ");
  for (std::size_t i = 0; i < noisy.size(); ++i) require_same_shape(noisy[i], conditions[i], "train_diffusion");

  DiffusionModel predictor(model);
  auto& net = predictor.network();
  const auto schedule = predictor.schedule();
  auto data = torch::cat({stack_images(noisy), stack_images(conditions)}, 1);

  TrainedModel out = model;
  TrainedModel last_good = model;
  std::vector<double> partial;
  try {
    out.loss_history = fit(
        *net, data, config.train,
        [&](const torch::Tensor& batch, torch::Generator& gen) {
          return diffusion_loss(predictor, batch.narrow(1, 0, 1), batch.narrow(1, 1, 1), schedule, gen);
        },
        [&](int, double loss) {
          partial.push_back(loss);
          last_good.loss_history = partial;
          last_good.parameters = capture_state(*net);
        });
  } catch (const TrainingError& e) {
    throw DivergenceError(std::string("diffusion training diverged: ") + e.what(), last_good);
  }
  out.parameters = capture_state(*net);
  nlohmann::json fp = config;
  out.fingerprint = sha256_hex(fp.dump() + model.content_hash());
  return out;
}

}  // namespace diffdenoise
