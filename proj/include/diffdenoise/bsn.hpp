#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "diffdenoise/checkpoint.hpp"
#include "diffdenoise/image.hpp"
#include "diffdenoise/training.hpp"

namespace diffdenoise {

struct BsnConfig {
  int blind_spot_size = 1;  ///< side of the excluded square, odd
  int channels = 32;
  int depth = 4;     ///< number of dilated 3x3 layers after the masked head
  int dilation = 0;  ///< 0 selects blind_spot_size + 1
  TrainSchedule train{};

  BsnConfig() { train.learning_rate = 1e-4; }

  int effective_dilation() const noexcept { return dilation == 0 ? blind_spot_size + 1 : dilation; }
  int head_kernel() const noexcept { return blind_spot_size + 2; }
  void validate() const;
};

void to_json(nlohmann::json& j, const BsnConfig& c);
void from_json(const nlohmann::json& j, BsnConfig& c);

/// Blind-spot size used for a noise regime when the config does not pin one:
/// 1 for i.i.d. noise, 5 up to corr_sigma 0.5, 9 beyond.
int default_blind_spot_size(double corr_sigma);

/// Every input offset (dy, dx) that can influence an output pixel through
/// the masked head followed by `depth` dilated 3x3 layers.
std::vector<std::pair<int, int>> receptive_offsets(int blind_spot_size, int dilation, int depth);
/// True when some reachable offset falls inside the blind-spot square.
bool blind_spot_leaks(int blind_spot_size, int dilation, int depth);

/// Masked head conv (kernel b+2 with the central bxb zeroed), residual
/// dilated 3x3 body, 1x1 tail. Zero padding only: reflected borders would
/// route blind-spot pixels back into the receptive field.
class BlindSpotNetImpl : public torch::nn::Module {
 public:
  explicit BlindSpotNetImpl(const BsnConfig& config);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int head_padding_;
  torch::Tensor head_weight_;
  torch::Tensor head_bias_;
  torch::Tensor head_mask_;
  torch::nn::ModuleList body_;
  torch::nn::Conv2d hidden_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(BlindSpotNet);

/// Untrained model handle. Throws ConstructionError if the stack would leak.
TrainedModel build_bsn(const BsnConfig& config);

/// Self-supervised fit: MSE between the network output and its own noisy input.
TrainedModel train_bsn(const TrainedModel& model, const std::vector<ImagePatch>& noisy, const BsnConfig& config);

/// Inference wrapper around a trained BSN checkpoint.
class BsnDenoiser {
 public:
  explicit BsnDenoiser(const TrainedModel& model);
  ImagePatch denoise(const ImagePatch& noisy);
  BlindSpotNet& network() { return net_; }

 private:
  BlindSpotNet net_{nullptr};
};

/// Deterministic x_c. Throws ConfigError for an untrained handle.
ImagePatch bsn_denoise(const TrainedModel& model, const ImagePatch& noisy);

BlindSpotNet instantiate_bsn(const TrainedModel& model);

}  // namespace diffdenoise
