#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffdenoise/checkpoint.hpp"
#include "diffdenoise/diffusion.hpp"
#include "diffdenoise/image.hpp"

namespace diffdenoise {

enum class SampleMode { srds, single, random_pair };
std::string to_string(SampleMode mode);
SampleMode parse_sample_mode(const std::string& name);

struct SrdsResult {
  ImagePatch output;      ///< (branch_pos + branch_neg) / 2
  ImagePatch branch_pos;  ///< x_c + r from +eps
  ImagePatch branch_neg;  ///< x_c + r from -eps
  std::uint64_t eps_seed = 0;
};

/// Standard normal field drawn from Rng(seed).
ImagePatch draw_standard_normal(int height, int width, std::uint64_t seed);

/// One deterministic reverse chain started at `eps`; returns condition + r / k.
ImagePatch sample_branch(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                         const ImagePatch& eps, const DiffusionSchedule& schedule, int steps);

/// Antithetic pair started at eps and -eps.
SrdsResult srds_from_noise(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                           const ImagePatch& eps, const DiffusionSchedule& schedule, int steps,
                           std::uint64_t eps_seed = 0);

SrdsResult srds_sample(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                       const DiffusionSchedule& schedule, int steps, std::uint64_t eps_seed);

ImagePatch single_branch_sample(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                                const DiffusionSchedule& schedule, int steps, std::uint64_t eps_seed);

/// Mean of two independent branches; seed_a == seed_b is rejected.
ImagePatch random_pair_average(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                               const DiffusionSchedule& schedule, int steps, std::uint64_t seed_a,
                               std::uint64_t seed_b);

/// Sampling front end over a diffusion checkpoint. Throws ConfigError for an
/// untrained checkpoint.
class DiffusionSampler {
 public:
  explicit DiffusionSampler(const TrainedModel& model);

  SrdsResult srds(const ImagePatch& noisy, const ImagePatch& condition, int steps, std::uint64_t eps_seed);
  ImagePatch single(const ImagePatch& noisy, const ImagePatch& condition, int steps, std::uint64_t eps_seed);
  ImagePatch random_pair(const ImagePatch& noisy, const ImagePatch& condition, int steps, std::uint64_t seed_a,
                         std::uint64_t seed_b);
  /// Dispatches on mode; random-pair uses (seed, derive_seed(seed, "pair")).
  ImagePatch sample(SampleMode mode, const ImagePatch& noisy, const ImagePatch& condition, int steps,
                    std::uint64_t seed);

  DiffusionModel& model() noexcept { return model_; }

 private:
  DiffusionModel model_;
};

/// Per-image eps seed derived from the experiment seed and patch id.
std::uint64_t image_eps_seed(std::uint64_t experiment_seed, const std::string& image_id);

/// Mean over pixels of ((pos - neg) / 2)^2.
double branch_variance(const SrdsResult& result);

}  // namespace diffdenoise
