#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "diffdenoise/image.hpp"

namespace diffdenoise {

/// [1,1,H,W] float32 copy of the image.
torch::Tensor to_tensor(const ImagePatch& image);
/// [N,1,H,W]; all images must share a shape.
torch::Tensor stack_images(const std::vector<ImagePatch>& images);
/// Accepts [H,W], [1,H,W] or [1,1,H,W].
ImagePatch to_image(const torch::Tensor& tensor);

/// Minibatch optimisation settings common to every trained stage.
struct TrainSchedule {
  int epochs = 20;
  int batch_size = 8;
  int crop = 0;  ///< random square crop side; 0 trains on whole patches
  double learning_rate = 1e-4;
  bool augment = true;  ///< random rot90 / flip per batch
  bool cosine_decay = true;
  double grad_clip = 0.0;  ///< 0 disables
  std::uint64_t seed = 0;

  void validate(int patch_size) const;
};

void to_json(nlohmann::json& j, const TrainSchedule& s);
/// Reads only the keys present; unknown keys are the caller's concern.
void read_schedule(const nlohmann::json& j, TrainSchedule& s);

/// Computes the loss of one batch; `batch` is [B, C, h, w] with the channel
/// layout of the stacked dataset.
using BatchLoss = std::function<torch::Tensor(const torch::Tensor& batch, torch::Generator& gen)>;

using EpochHook = std::function<void(int epoch, double mean_loss)>;

/// Adam over shuffled minibatches. Returns the mean loss of every epoch.
/// Throws TrainingError on a non-finite loss.
std::vector<double> fit(torch::nn::Module& module, const torch::Tensor& dataset, const TrainSchedule& schedule,
                        const BatchLoss& loss, const EpochHook& on_epoch = {});

/// Pins intra-op threads to one so results are bit-stable on a given machine.
void configure_torch_determinism();

}  // namespace diffdenoise
