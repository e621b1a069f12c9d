#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "diffdenoise/checkpoint.hpp"
#include "diffdenoise/diffusion.hpp"
#include "diffdenoise/image.hpp"
#include "diffdenoise/metrics.hpp"
#include "diffdenoise/training.hpp"

namespace diffdenoise {

struct DistillConfig {
  int layers = 8;  ///< conv layers including input and output
  int channels = 48;
  TrainSchedule train{};

  DistillConfig() { train.learning_rate = 5e-4; }
  void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

/// Noisy inputs paired with SRDS targets, plus where the targets came from.
struct DistillDataset {
  std::vector<ImagePatch> noisy;
  std::vector<ImagePatch> target;
  int iteration = 1;
  std::string diffusion_hash;
  std::vector<std::uint64_t> eps_seeds;

  /// Throws ConfigError when empty, ShapeError on any shape mismatch.
  void validate() const;
};

/// Plain residual CNN: conv-ReLU stack whose output is added to the input.
class RestorationNetImpl : public torch::nn::Module {
 public:
  RestorationNetImpl(int layers, int channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::ModuleList convs_;
};
TORCH_MODULE(RestorationNet);

/// L1 regression from noisy to target. Throws TrainingError on divergence.
TrainedModel train_distilled(const DistillDataset& dataset, const DistillConfig& config);

/// Loaded distilled checkpoint; denoise() is a single forward pass.
class Distiller {
 public:
  explicit Distiller(const TrainedModel& model);
  ImagePatch denoise(const ImagePatch& noisy);

 private:
  RestorationNet net_{nullptr};
};

ImagePatch distilled_denoise(const TrainedModel& model, const ImagePatch& noisy);

/// Produces the diffusion condition for a noisy image. `iteration` is the
/// iteration whose output it yields: 0 for the BSN, k for the k-th distilled model.
struct ConditionSource {
  int iteration = 0;
  std::function<ImagePatch(const ImagePatch&)> condition;
};

ConditionSource bsn_condition_source(const TrainedModel& bsn);
ConditionSource distilled_condition_source(const TrainedModel& distilled, int iteration);

struct IterationDataset {
  std::vector<ImagePatch> train_noisy;
  std::vector<std::string> train_ids;
  std::vector<ImagePatch> eval_noisy;
  std::vector<ImagePatch> eval_clean;
  std::vector<std::string> eval_ids;
};

struct IterationConfig {
  DiffusionConfig diffusion;
  DistillConfig distill;
  int steps = 50;
  std::uint64_t seed = 0;
};

struct IterationResult {
  TrainedModel diffusion;
  TrainedModel distilled;
  /// Methods "noisy", "condition", "srds", "distilled" over the eval set.
  MetricReport report;
};

/// Iteration k: trains a diffusion model conditioned on `source`, samples SRDS
/// targets for the training images, distills them and scores the eval set.
/// For k >= 2 the source must come from iteration k - 1.
IterationResult run_iteration(const ConditionSource& source, const IterationDataset& dataset, int k,
                              const IterationConfig& config);

}  // namespace diffdenoise
