#include "diffdenoise/distill.hpp"

#include <set>

#include "diffdenoise/bsn.hpp"
#include "diffdenoise/error.hpp"
#include "diffdenoise/hash.hpp"
#include "diffdenoise/rng.hpp"
#include "diffdenoise/srds.hpp"

namespace diffdenoise {

void DistillConfig::validate() const {
  if (layers < 2) throw ConfigError("distill layers must be >= 2");
  if (channels < 1) throw ConfigError("distill channels must be >= 1");
}

void to_json(nlohmann::json& j, const DistillConfig& c) {
  j = nlohmann::json{{"layers", c.layers}, {"channels", c.channels}, {"train", c.train}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
  c = DistillConfig{};
  static const std::set<std::string> kTrainKeys = {"epochs", "batch_size", "crop", "learning_rate",
                                                   "augment", "cosine_decay", "grad_clip", "seed"};
  for (const auto& [key, value] : j.items()) {
    if (key == "layers") c.layers = value.get<int>();
    else if (key == "channels") c.channels = value.get<int>();
    else if (key == "train") {
      for (const auto& [tk, tv] : value.items()) {
        if (kTrainKeys.count(tk) == 0) throw ConfigError("unknown distill.train key '" + tk + "'");
      }
      read_schedule(value, c.train);
    } else {
      throw ConfigError("unknown distill key '" + key + "'");
    }
  }
  c.validate();
}

void DistillDataset::validate() const {
  if (noisy.empty()) throw ConfigError("distillation dataset is empty");
  if (noisy.size() != target.size()) throw ShapeError("distillation dataset: noisy/target counts differ");
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    require_same_shape(noisy[i], target[i], "distillation pair");
    require_same_shape(noisy[i], noisy.front(), "distillation dataset");
  }
  if (iteration < 1) throw ConfigError("distillation iteration must be >= 1");
}

RestorationNetImpl::RestorationNetImpl(int layers, int channels) {
  for (int i = 0; i < layers; ++i) {
    const int in = i == 0 ? 1 : channels;
    const int out = i == layers - 1 ? 1 : channels;
    convs_->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
  }
  register_module("convs", convs_);
  auto last = convs_[convs_->size() - 1]->as<torch::nn::Conv2d>();
  torch::NoGradGuard no_grad;
  last->weight.mul_(0.1);
  last->bias.zero_();
}

torch::Tensor RestorationNetImpl::forward(const torch::Tensor& x) {
  auto h = x;
  const auto n = convs_->size();
  for (std::size_t i = 0; i < n; ++i) {
    h = convs_[i]->as<torch::nn::Conv2d>()->forward(h);
    if (i + 1 < n) h = torch::relu(h);
  }
  return x + h;
}

TrainedModel train_distilled(const DistillDataset& dataset, const DistillConfig& config) {
  dataset.validate();
  config.validate();
  torch::manual_seed(derive_seed(config.train.seed, "distill-init"));
  RestorationNet net(config.layers, config.channels);
  auto data = torch::cat({stack_images(dataset.noisy), stack_images(dataset.target)}, 1);
  TrainedModel m;
  m.stage = ModelStage::distilled;
  m.architecture = {{"kind", "restoration_net"},
                    {"layers", config.layers},
                    {"channels", config.channels},
                    {"iteration", dataset.iteration},
                    {"diffusion_hash", dataset.diffusion_hash}};
  m.loss_history = fit(*net, data, config.train, [&](const torch::Tensor& batch, torch::Generator&) {
    return torch::mean(torch::abs(net->forward(batch.narrow(1, 0, 1)) - batch.narrow(1, 1, 1)));
  });
  m.parameters = capture_state(*net);
  nlohmann::json fp = {{"config", config}, {"diffusion_hash", dataset.diffusion_hash},
                       {"iteration", dataset.iteration}, {"eps_seeds", dataset.eps_seeds}};
  m.fingerprint = sha256_hex(fp.dump());
  return m;
}

Distiller::Distiller(const TrainedModel& model) {
  if (model.stage != ModelStage::distilled) throw ConfigError("model is not a distilled checkpoint");
  if (!model.trained()) throw ConfigError("distilled model handle is untrained");
  const auto& a = model.architecture;
  if (a.value("kind", "") != "restoration_net") throw FormatError("unexpected distilled architecture");
  net_ = RestorationNet(a.at("layers").get<int>(), a.at("channels").get<int>());
  restore_state(*net_, model.parameters);
  net_->eval();
}

ImagePatch Distiller::denoise(const ImagePatch& noisy) {
  configure_torch_determinism();
  torch::NoGradGuard no_grad;
  auto out = to_image(net_->forward(to_tensor(noisy)));
  if (!out.all_finite()) throw TrainingError("distilled network produced non-finite output");
  return out;
}

ImagePatch distilled_denoise(const TrainedModel& model, const ImagePatch& noisy) {
  Distiller d(model);
  return d.denoise(noisy);
}

ConditionSource bsn_condition_source(const TrainedModel& bsn) {
  auto denoiser = std::make_shared<BsnDenoiser>(bsn);
  return {0, [denoiser](const ImagePatch& noisy) { return denoiser->denoise(noisy); }};
}

ConditionSource distilled_condition_source(const TrainedModel& distilled, int iteration) {
  if (iteration < 1) throw ConfigError("distilled condition source needs iteration >= 1");
  auto d = std::make_shared<Distiller>(distilled);
  return {iteration, [d](const ImagePatch& noisy) { return d->denoise(noisy); }};
}

namespace {

std::vector<double> psnr_all(const std::vector<ImagePatch>& clean, const std::vector<ImagePatch>& test) {
  std::vector<double> out;
  for (std::size_t i = 0; i < clean.size(); ++i) out.push_back(psnr(clean[i], test[i]));
  return out;
}

std::vector<double> ssim_all(const std::vector<ImagePatch>& clean, const std::vector<ImagePatch>& test) {
  std::vector<double> out;
  for (std::size_t i = 0; i < clean.size(); ++i) out.push_back(ssim(clean[i], test[i]));
  return out;
}

}  // namespace

IterationResult run_iteration(const ConditionSource& source, const IterationDataset& dataset, int k,
                              const IterationConfig& config) {
  if (k < 1) throw ConfigError("iteration index must be >= 1");
  if (source.iteration != k - 1) {
    throw ConfigError("iteration " + std::to_string(k) + " requires the output of iteration " + std::to_string(k - 1));
  }
  if (!source.condition) throw ConfigError("missing condition source");
  if (dataset.train_noisy.size() != dataset.train_ids.size() || dataset.eval_noisy.size() != dataset.eval_ids.size() ||
      dataset.eval_noisy.size() != dataset.eval_clean.size()) {
    throw ShapeError("iteration dataset lists have inconsistent lengths");
  }

  std::vector<ImagePatch> train_cond;
  for (const auto& x : dataset.train_noisy) train_cond.push_back(source.condition(x));

  IterationResult result;
  auto diff_cfg = config.diffusion;
  diff_cfg.train.seed = derive_seed(config.seed, static_cast<std::uint64_t>(k) * 2 + 1);
  result.diffusion = train_diffusion(build_diffusion(diff_cfg), dataset.train_noisy, train_cond, diff_cfg);

  DiffusionSampler sampler(result.diffusion);
  DistillDataset distill_set;
  distill_set.iteration = k;
  distill_set.diffusion_hash = result.diffusion.content_hash();
  distill_set.noisy = dataset.train_noisy;
  for (std::size_t i = 0; i < dataset.train_noisy.size(); ++i) {
    const auto seed = image_eps_seed(config.seed, dataset.train_ids[i]);
    distill_set.eps_seeds.push_back(seed);
    distill_set.target.push_back(sampler.srds(dataset.train_noisy[i], train_cond[i], config.steps, seed).output);
  }
  auto distill_cfg = config.distill;
  distill_cfg.train.seed = derive_seed(config.seed, static_cast<std::uint64_t>(k) * 2 + 2);
  result.distilled = train_distilled(distill_set, distill_cfg);

  Distiller distiller(result.distilled);
  std::vector<ImagePatch> cond, srds, final_out;
  for (std::size_t i = 0; i < dataset.eval_noisy.size(); ++i) {
    const auto& x = dataset.eval_noisy[i];
    cond.push_back(source.condition(x));
    srds.push_back(sampler.srds(x, cond.back(), config.steps, image_eps_seed(config.seed, dataset.eval_ids[i])).output);
    final_out.push_back(distiller.denoise(x));
  }
  result.report = MetricReport(dataset.eval_ids);
  result.report.add_method("noisy", psnr_all(dataset.eval_clean, dataset.eval_noisy),
                           ssim_all(dataset.eval_clean, dataset.eval_noisy));
  result.report.add_method("condition", psnr_all(dataset.eval_clean, cond), ssim_all(dataset.eval_clean, cond));
  result.report.add_method("srds", psnr_all(dataset.eval_clean, srds), ssim_all(dataset.eval_clean, srds));
  result.report.add_method("distilled", psnr_all(dataset.eval_clean, final_out),
                           ssim_all(dataset.eval_clean, final_out));
  return result;
}

}  // namespace diffdenoise
