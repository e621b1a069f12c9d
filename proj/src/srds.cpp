#include "diffdenoise/srds.hpp"

#include "diffdenoise/error.hpp"
#include "diffdenoise/rng.hpp"
#include "diffdenoise/training.hpp"

namespace diffdenoise {

std::string to_string(SampleMode mode) {
  switch (mode) {
    case SampleMode::srds: return "srds";
    case SampleMode::single: return "single";
    case SampleMode::random_pair: return "random-pair";
  }
  return "srds";
}

SampleMode parse_sample_mode(const std::string& name) {
  if (name == "srds") return SampleMode::srds;
  if (name == "single") return SampleMode::single;
  if (name == "random-pair") return SampleMode::random_pair;
  throw ConfigError("unknown sample mode '" + name + "'");
}

ImagePatch draw_standard_normal(int height, int width, std::uint64_t seed) {
  Rng rng(seed);
  ImagePatch out(height, width);
  for (auto& v : out.values()) v = static_cast<float>(rng.normal());
  return out;
}

namespace {

void check_inputs(const ImagePatch& noisy, const ImagePatch& condition, int steps) {
  require_same_shape(noisy, condition, "sampling noisy/condition");
  if (steps < 1) throw ConfigError("sampling steps must be >= 1");
}

ImagePatch average(const ImagePatch& a, const ImagePatch& b) {
  ImagePatch out(a.height(), a.width());
  auto pa = a.values();
  auto pb = b.values();
  auto po = out.values();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = (pa[i] + pb[i]) * 0.5F;
  return out;
}

}  // namespace

ImagePatch sample_branch(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                         const ImagePatch& eps, const DiffusionSchedule& schedule, int steps) {
  check_inputs(noisy, condition, steps);
  require_same_shape(eps, condition, "sampling eps/condition");
  configure_torch_determinism();
  const auto times = ddim_timesteps(schedule.timesteps, steps);
  auto r = reverse_chain(model, to_tensor(eps), to_tensor(condition), times, schedule);
  auto out = to_image(to_tensor(condition) + r / model.residual_scale());
  if (!out.all_finite()) throw TrainingError("reverse diffusion produced non-finite values");
  return out;
}

SrdsResult srds_from_noise(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                           const ImagePatch& eps, const DiffusionSchedule& schedule, int steps,
                           std::uint64_t eps_seed) {
  auto pos = sample_branch(model, noisy, condition, eps, schedule, steps);
  auto neg = sample_branch(model, noisy, condition, eps * -1.0F, schedule, steps);
  auto out = average(pos, neg);
  return SrdsResult{std::move(out), std::move(pos), std::move(neg), eps_seed};
}

SrdsResult srds_sample(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                       const DiffusionSchedule& schedule, int steps, std::uint64_t eps_seed) {
  check_inputs(noisy, condition, steps);
  const auto eps = draw_standard_normal(condition.height(), condition.width(), eps_seed);
  return srds_from_noise(model, noisy, condition, eps, schedule, steps, eps_seed);
}

ImagePatch single_branch_sample(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                                const DiffusionSchedule& schedule, int steps, std::uint64_t eps_seed) {
  check_inputs(noisy, condition, steps);
  const auto eps = draw_standard_normal(condition.height(), condition.width(), eps_seed);
  return sample_branch(model, noisy, condition, eps, schedule, steps);
}

ImagePatch random_pair_average(NoisePredictor& model, const ImagePatch& noisy, const ImagePatch& condition,
                               const DiffusionSchedule& schedule, int steps, std::uint64_t seed_a,
                               std::uint64_t seed_b) {
  if (seed_a == seed_b) throw ConfigError("random_pair_average needs two distinct seeds");
  auto a = single_branch_sample(model, noisy, condition, schedule, steps, seed_a);
  auto b = single_branch_sample(model, noisy, condition, schedule, steps, seed_b);
  return average(a, b);
}

DiffusionSampler::DiffusionSampler(const TrainedModel& model)
    : model_([&]() -> const TrainedModel& {
        if (!model.trained()) throw ConfigError("sampling requires a trained diffusion model");
        return model;
      }()) {}

SrdsResult DiffusionSampler::srds(const ImagePatch& noisy, const ImagePatch& condition, int steps,
                                  std::uint64_t eps_seed) {
  return srds_sample(model_, noisy, condition, model_.schedule(), steps, eps_seed);
}

ImagePatch DiffusionSampler::single(const ImagePatch& noisy, const ImagePatch& condition, int steps,
                                    std::uint64_t eps_seed) {
  return single_branch_sample(model_, noisy, condition, model_.schedule(), steps, eps_seed);
}

ImagePatch DiffusionSampler::random_pair(const ImagePatch& noisy, const ImagePatch& condition, int steps,
                                         std::uint64_t seed_a, std::uint64_t seed_b) {
  return random_pair_average(model_, noisy, condition, model_.schedule(), steps, seed_a, seed_b);
}

ImagePatch DiffusionSampler::sample(SampleMode mode, const ImagePatch& noisy, const ImagePatch& condition, int steps,
                                    std::uint64_t seed) {
  switch (mode) {
    case SampleMode::srds: return srds(noisy, condition, steps, seed).output;
    case SampleMode::single: return single(noisy, condition, steps, seed);
    case SampleMode::random_pair: return random_pair(noisy, condition, steps, seed, derive_seed(seed, "pair"));
  }
  throw ConfigError("unknown sample mode");
}

std::uint64_t image_eps_seed(std::uint64_t experiment_seed, const std::string& image_id) {
  return derive_seed(derive_seed(experiment_seed, "eps"), image_id.c_str());
}

double branch_variance(const SrdsResult& result) {
  auto a = result.branch_pos.values();
  auto b = result.branch_neg.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = 0.5 * (static_cast<double>(a[i]) - static_cast<double>(b[i]));
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace diffdenoise
