#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "diffdenoise/checkpoint.hpp"
#include "diffdenoise/error.hpp"
#include "diffdenoise/image.hpp"
#include "diffdenoise/training.hpp"

namespace diffdenoise {

/// Linear-beta schedule with cumulative products alpha_bar[0..T], alpha_bar[0] = 1.
struct DiffusionSchedule {
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::vector<double> alpha_bar;

  double signal(int t) const { return std::sqrt(alpha_bar.at(static_cast<std::size_t>(t))); }
  double noise(int t) const { return std::sqrt(1.0 - alpha_bar.at(static_cast<std::size_t>(t))); }
};

DiffusionSchedule make_schedule(int timesteps, double beta_start, double beta_end);

/// Uniformly spaced descending timesteps T = t_0 > t_1 > ... > t_steps = 0.
std::vector<int> ddim_timesteps(int timesteps, int steps);

/// r = noisy - condition, held in double so that r + condition reproduces the
/// float32 noisy image exactly.
class ResidualTarget {
 public:
  ResidualTarget(const ImagePatch& noisy, const ImagePatch& condition);
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  const std::vector<double>& values() const noexcept { return r_; }
  ImagePatch reconstruct(const ImagePatch& condition) const;
  /// [1,1,H,W] tensor of the given dtype.
  torch::Tensor tensor(torch::ScalarType dtype = torch::kFloat32) const;

 private:
  int height_;
  int width_;
  std::vector<double> r_;
};

/// Noised residual at step t together with its condition.
struct DiffusionState {
  torch::Tensor x_t;
  int t = 0;
  torch::Tensor condition;
};

/// Anything that predicts the injected noise from (x_t, condition, t).
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  /// x_t and condition are [B,1,H,W]; t is an int64 tensor of length B.
  virtual torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor& condition,
                                      const torch::Tensor& t) = 0;
  /// Multiplier applied to residuals before diffusion; samples are divided by it.
  virtual double residual_scale() const { return 1.0; }
};

/// x_t = sqrt(abar_t) r + sqrt(1 - abar_t) eps.
DiffusionState forward_diffuse(const torch::Tensor& residual, int t, const torch::Tensor& eps,
                               const torch::Tensor& condition, const DiffusionSchedule& schedule);
DiffusionState forward_diffuse(const ResidualTarget& residual, int t, const ImagePatch& eps,
                               const ImagePatch& condition, const DiffusionSchedule& schedule);

/// Batched forward process with one timestep per batch element.
torch::Tensor q_sample(const torch::Tensor& residual, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule);

/// L1 distance between predicted and injected noise, t uniform on [1, T].
/// `noisy` and `condition` are [B,1,H,W]; the residual is scaled by
/// predictor.residual_scale() before diffusion.
torch::Tensor diffusion_loss(NoisePredictor& predictor, const torch::Tensor& noisy, const torch::Tensor& condition,
                             const DiffusionSchedule& schedule, torch::Generator& gen);

/// Deterministic (eta = 0) DDIM update from state.t to t_next < state.t.
DiffusionState ddim_step(NoisePredictor& predictor, const DiffusionState& state, int t_next,
                         const DiffusionSchedule& schedule);

/// Runs ddim_step along `timesteps` (descending, first entry = state.t) and returns x at the last entry.
torch::Tensor reverse_chain(NoisePredictor& predictor, const torch::Tensor& x_start, const torch::Tensor& condition,
                            const std::vector<int>& timesteps, const DiffusionSchedule& schedule);

struct UNetConfig {
  int base_channels = 32;
  int levels = 3;
  void validate() const;
};

struct DiffusionConfig {
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double residual_scale = 1.0;
  UNetConfig unet{};
  TrainSchedule train{};

  DiffusionConfig() {
    train.learning_rate = 2e-4;
    train.grad_clip = 1.0;
  }
  void validate() const;
  DiffusionSchedule schedule() const { return make_schedule(timesteps, beta_start, beta_end); }
};

void to_json(nlohmann::json& j, const DiffusionConfig& c);
void from_json(const nlohmann::json& j, DiffusionConfig& c);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int in_channels, int out_channels, int embed_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& embedding);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
  torch::nn::Linear embed_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Small U-Net: input is concat(x_t, condition); sinusoidal timestep
/// embedding feeds every residual block.
class ConditionalUNetImpl : public torch::nn::Module {
 public:
  explicit ConditionalUNetImpl(const UNetConfig& config);
  torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& condition, const torch::Tensor& t);

 private:
  torch::Tensor timestep_features(const torch::Tensor& t) const;

  int base_;
  int levels_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d conv_in_{nullptr};
  torch::nn::ModuleList down_;
  ResBlock mid_{nullptr};
  torch::nn::ModuleList up_;
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(ConditionalUNet);

/// A diffusion checkpoint bound to its schedule, usable as a NoisePredictor.
class DiffusionModel : public NoisePredictor {
 public:
  explicit DiffusionModel(const TrainedModel& model);
  torch::Tensor predict_noise(const torch::Tensor& x_t, const torch::Tensor& condition,
                              const torch::Tensor& t) override;
  double residual_scale() const override { return residual_scale_; }
  const DiffusionSchedule& schedule() const noexcept { return schedule_; }
  ConditionalUNet& network() { return net_; }

 private:
  ConditionalUNet net_{nullptr};
  DiffusionSchedule schedule_;
  double residual_scale_ = 1.0;
};

TrainedModel build_diffusion(const DiffusionConfig& config);

/// Minimizes the L1 noise-prediction loss on (noisy, condition) pairs.
/// A non-finite loss raises TrainingError carrying the last good checkpoint.
TrainedModel train_diffusion(const TrainedModel& model, const std::vector<ImagePatch>& noisy,
                             const std::vector<ImagePatch>& conditions, const DiffusionConfig& config);

/// Training diverged; carries the checkpoint from the last finite epoch.
class DivergenceError : public TrainingError {
 public:
  DivergenceError(const std::string& what, TrainedModel last_good)
      : TrainingError(what), last_good_(std::move(last_good)) {}
  const TrainedModel& last_good() const noexcept { return last_good_; }

 private:
  TrainedModel last_good_;
};

}  // namespace diffdenoise
