#include "diffdenoise/training.hpp"

#include <cmath>
#include <numbers>

#include "diffdenoise/error.hpp"
#include "diffdenoise/rng.hpp"

namespace diffdenoise {

torch::Tensor to_tensor(const ImagePatch& image) {
  auto t = torch::empty({1, 1, image.height(), image.width()}, torch::kFloat32);
  std::copy(image.values().begin(), image.values().end(), t.data_ptr<float>());
  return t;
}

torch::Tensor stack_images(const std::vector<ImagePatch>& images) {
  if (images.empty()) throw ShapeError("cannot stack an empty image list");
  const int h = images.front().height();
  const int w = images.front().width();
  auto t = torch::empty({static_cast<std::int64_t>(images.size()), 1, h, w}, torch::kFloat32);
  float* dst = t.data_ptr<float>();
  for (const auto& img : images) {
    require_same_shape(img, images.front(), "stack_images");
    dst = std::copy(img.values().begin(), img.values().end(), dst);
  }
  return t;
}

ImagePatch to_image(const torch::Tensor& tensor) {
  auto t = tensor.detach();
  while (t.dim() > 2) {
    if (t.size(0) != 1) throw ShapeError("to_image expects a single-image tensor");
    t = t.squeeze(0);
  }
  if (t.dim() != 2) throw ShapeError("to_image expects a 2-D tensor");
  t = t.to(torch::kFloat32).contiguous();
  const auto h = static_cast<int>(t.size(0));
  const auto w = static_cast<int>(t.size(1));
  std::vector<float> data(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  return ImagePatch(h, w, std::move(data));
}

void TrainSchedule::validate(int patch_size) const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (crop < 0 || crop > patch_size) throw ConfigError("crop must be in [0, patch size]");
  if (crop != 0 && crop < ImagePatch::kMinSide) throw ConfigError("crop below minimum patch side");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
}

void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"epochs", s.epochs},       {"batch_size", s.batch_size},     {"crop", s.crop},
                     {"learning_rate", s.learning_rate}, {"augment", s.augment}, {"cosine_decay", s.cosine_decay},
                     {"grad_clip", s.grad_clip}, {"seed", s.seed}};
}

void read_schedule(const nlohmann::json& j, TrainSchedule& s) {
  if (j.contains("epochs")) s.epochs = j["epochs"].get<int>();
  if (j.contains("batch_size")) s.batch_size = j["batch_size"].get<int>();
  if (j.contains("crop")) s.crop = j["crop"].get<int>();
  if (j.contains("learning_rate")) s.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("augment")) s.augment = j["augment"].get<bool>();
  if (j.contains("cosine_decay")) s.cosine_decay = j["cosine_decay"].get<bool>();
  if (j.contains("grad_clip")) s.grad_clip = j["grad_clip"].get<double>();
  if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
}

void configure_torch_determinism() {
  static const bool once = [] {
    torch::set_num_threads(1);
    return true;
  }();
  (void)once;
}

std::vector<double> fit(torch::nn::Module& module, const torch::Tensor& dataset, const TrainSchedule& schedule,
                        const BatchLoss& loss, const EpochHook& on_epoch) {
  configure_torch_determinism();
  const auto n = dataset.size(0);
  const auto h = dataset.size(2);
  const auto w = dataset.size(3);
  if (n < 1) throw TrainingError("empty training set");
  schedule.validate(static_cast<int>(std::min(h, w)));
  const std::int64_t crop = schedule.crop == 0 ? 0 : schedule.crop;

  Rng rng(derive_seed(schedule.seed, "batches"));
  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(schedule.seed, "torch"));

  module.train();
  torch::optim::Adam opt(module.parameters(), torch::optim::AdamOptions(schedule.learning_rate));
  const std::int64_t batches_per_epoch = (n + schedule.batch_size - 1) / schedule.batch_size;
  const std::int64_t total_steps = batches_per_epoch * schedule.epochs;
  std::int64_t step = 0;

  std::vector<double> history;
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.next_u64() % i]);

    double epoch_loss = 0.0;
    std::int64_t epoch_batches = 0;
    for (std::int64_t start = 0; start < n; start += schedule.batch_size) {
      const std::int64_t stop = std::min(n, start + schedule.batch_size);
      std::vector<torch::Tensor> items;
      for (std::int64_t k = start; k < stop; ++k) {
        auto item = dataset[order[static_cast<std::size_t>(k)]];
        if (crop > 0) {
          const auto top = static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(h - crop + 1));
          const auto left = static_cast<std::int64_t>(rng.next_u64() % static_cast<std::uint64_t>(w - crop + 1));
          item = item.narrow(1, top, crop).narrow(2, left, crop);
        }
        items.push_back(item);
      }
      auto batch = torch::stack(items);
      if (schedule.augment) {
        const auto turns = static_cast<std::int64_t>(rng.next_u64() % 4);
        if (turns != 0) batch = torch::rot90(batch, turns, {2, 3});
        if ((rng.next_u64() & 1U) != 0) batch = torch::flip(batch, {3});
      }
      batch = batch.contiguous();

      if (schedule.cosine_decay) {
        const double progress = static_cast<double>(step) / static_cast<double>(std::max<std::int64_t>(1, total_steps));
        const double lr = schedule.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
        for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
      }
      opt.zero_grad();
      auto value = loss(batch, gen);
      const double v = value.item<double>();
      if (!std::isfinite(v)) {
        throw TrainingError("loss became non-finite at epoch " + std::to_string(epoch + 1) + ", step " +
                            std::to_string(step) + " (learning rate " + std::to_string(schedule.learning_rate) + ")");
      }
      value.backward();
      if (schedule.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(module.parameters(), schedule.grad_clip);
      opt.step();
      epoch_loss += v;
      ++epoch_batches;
      ++step;
    }
    history.push_back(epoch_loss / static_cast<double>(epoch_batches));
    if (on_epoch) on_epoch(epoch, history.back());
  }
  module.eval();
  return history;
}

}  // namespace diffdenoise
