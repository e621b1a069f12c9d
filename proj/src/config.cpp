#include "diffdenoise/config.hpp"

#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "diffdenoise/error.hpp"
#include "diffdenoise/hash.hpp"

namespace diffdenoise {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (known.count(key) == 0) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::string to_string(Normalization n) { return n == Normalization::per_image ? "per_image" : "per_dataset"; }

Normalization parse_normalization(const std::string& s) {
  if (s == "per_image") return Normalization::per_image;
  if (s == "per_dataset") return Normalization::per_dataset;
  throw ConfigError("unknown normalization '" + s + "'");
}

nlohmann::json dataset_json(const DatasetConfig& d) {
  return {{"source", d.source},
          {"count", d.count},
          {"size", d.size},
          {"images", d.images},
          {"patch_size", d.patch_size},
          {"stride", d.stride},
          {"normalization", to_string(d.normalization)},
          {"splits", {{"train", d.splits.train}, {"val", d.splits.val}, {"test", d.splits.test}}}};
}

DatasetConfig read_dataset(const nlohmann::json& j) {
  reject_unknown(j, {"source", "count", "size", "images", "patch_size", "stride", "normalization", "splits"}, "dataset");
  DatasetConfig d;
  if (j.contains("source")) d.source = j["source"].get<std::string>();
  if (j.contains("count")) d.count = j["count"].get<int>();
  if (j.contains("size")) d.size = j["size"].get<int>();
  if (j.contains("images")) d.images = j["images"].get<std::vector<std::string>>();
  if (j.contains("patch_size")) d.patch_size = j["patch_size"].get<int>();
  if (j.contains("stride")) d.stride = j["stride"].get<int>();
  if (j.contains("normalization")) d.normalization = parse_normalization(j["normalization"].get<std::string>());
  if (j.contains("splits")) {
    const auto& s = j["splits"];
    reject_unknown(s, {"train", "val", "test"}, "dataset.splits");
    d.splits.train = s.value("train", 0);
    d.splits.val = s.value("val", 0);
    d.splits.test = s.value("test", 0);
  }
  return d;
}

nlohmann::json regime_json(const RegimeConfig& r) {
  return {{"name", r.name},          {"noise", r.noise},         {"blind_spot_size", r.blind_spot_size},
          {"iterations", r.iterations}, {"ablation", r.ablation}, {"stability", r.stability}};
}

RegimeConfig read_regime(const nlohmann::json& j) {
  reject_unknown(j, {"name", "noise", "blind_spot_size", "iterations", "ablation", "stability"}, "regime");
  RegimeConfig r;
  if (!j.contains("name")) throw ConfigError("regime without a name");
  r.name = j["name"].get<std::string>();
  if (!j.contains("noise")) throw ConfigError("regime '" + r.name + "' has no noise block");
  r.noise = j["noise"].get<NoiseSpec>();
  r.blind_spot_size = j.value("blind_spot_size", 0);
  r.iterations = j.value("iterations", 1);
  r.ablation = j.value("ablation", false);
  r.stability = j.value("stability", false);
  return r;
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto& d = dataset;
  if (d.source != "phantom" && d.source != "images") throw ConfigError("dataset.source must be 'phantom' or 'images'");
  if (d.source == "phantom") {
    if (d.count < 1) throw ConfigError("dataset.count must be >= 1");
    if (d.size < ImagePatch::kMinSide) throw ConfigError("dataset.size below minimum patch side");
  } else if (d.images.empty()) {
    throw ConfigError("dataset.images is empty");
  }
  if (d.patch_size < ImagePatch::kMinSide) throw ConfigError("dataset.patch_size below minimum patch side");
  if (d.stride < 1) throw ConfigError("dataset.stride must be >= 1");
  if (d.splits.train < 1 || d.splits.test < 5 || d.splits.val < 0) {
    throw ConfigError("dataset.splits needs train >= 1, test >= 5 (paired tests), val >= 0");
  }
  const int divisor = 1 << (diffusion.unet.levels - 1);
  if (d.patch_size % divisor != 0) {
    throw ConfigError("dataset.patch_size must be divisible by " + std::to_string(divisor));
  }
  if (diffusion.train.crop % divisor != 0) throw ConfigError("diffusion.train.crop must be divisible by " + std::to_string(divisor));

  if (regimes.empty()) throw ConfigError("at least one regime is required");
  static const std::regex kName("[A-Za-z0-9_-]+");
  std::set<std::string> names;
  for (const auto& r : regimes) {
    if (!std::regex_match(r.name, kName)) throw ConfigError("regime name '" + r.name + "' must match [A-Za-z0-9_-]+");
    if (!names.insert(r.name).second) throw ConfigError("duplicate regime name '" + r.name + "'");
    r.noise.validate();
    if (r.iterations < 1) throw ConfigError("regime '" + r.name + "': iterations must be >= 1");
    bsn_for(r).validate();
  }
  bsn.validate();
  diffusion.validate();
  distill.validate();
  bsn.train.validate(d.patch_size);
  diffusion.train.validate(d.patch_size);
  distill.train.validate(d.patch_size);
  if (srds.steps < 1 || srds.steps > diffusion.timesteps) throw ConfigError("srds.steps must be in [1, timesteps]");
  if (eval.stability_seeds < 2) throw ConfigError("eval.stability_seeds must be >= 2");
  if (eval.stability_images < 1 || eval.stability_images > d.splits.test) {
    throw ConfigError("eval.stability_images must be in [1, splits.test]");
  }
}

const RegimeConfig& ExperimentConfig::regime(const std::string& name) const {
  for (const auto& r : regimes) {
    if (r.name == name) return r;
  }
  throw ConfigError("no regime named '" + name + "'");
}

BsnConfig ExperimentConfig::bsn_for(const RegimeConfig& r) const {
  BsnConfig c = bsn;
  c.blind_spot_size = r.blind_spot_size > 0 ? r.blind_spot_size : default_blind_spot_size(r.noise.corr_sigma);
  return c;
}

std::string ExperimentConfig::hash() const {
  nlohmann::json j = *this;
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json regimes = nlohmann::json::array();
  for (const auto& r : c.regimes) regimes.push_back(regime_json(r));
  nlohmann::json bsn = c.bsn;
  bsn.erase("blind_spot_size");
  j = nlohmann::json{{"seed", c.seed},
                     {"output_dir", c.output_dir},
                     {"dataset", dataset_json(c.dataset)},
                     {"regimes", regimes},
                     {"bsn", bsn},
                     {"diffusion", c.diffusion},
                     {"srds", {{"steps", c.srds.steps}, {"mode", to_string(c.srds.mode)}}},
                     {"distill", c.distill},
                     {"eval", {{"stability_seeds", c.eval.stability_seeds},
                               {"stability_images", c.eval.stability_images}}}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  reject_unknown(j, {"seed", "output_dir", "dataset", "regimes", "bsn", "diffusion", "srds", "distill", "eval"},
                 "config");
  c = ExperimentConfig{};
  try {
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("dataset")) c.dataset = read_dataset(j["dataset"]);
    if (j.contains("regimes")) {
      for (const auto& r : j["regimes"]) c.regimes.push_back(read_regime(r));
    }
    if (j.contains("bsn")) {
      if (j["bsn"].contains("blind_spot_size")) throw ConfigError("bsn.blind_spot_size is set per regime");
      c.bsn = j["bsn"].get<BsnConfig>();
    }
    if (j.contains("diffusion")) c.diffusion = j["diffusion"].get<DiffusionConfig>();
    if (j.contains("srds")) {
      const auto& s = j["srds"];
      reject_unknown(s, {"steps", "mode"}, "srds");
      c.srds.steps = s.value("steps", c.srds.steps);
      if (s.contains("mode")) c.srds.mode = parse_sample_mode(s["mode"].get<std::string>());
    }
    if (j.contains("distill")) c.distill = j["distill"].get<DistillConfig>();
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      reject_unknown(e, {"stability_seeds", "stability_images"}, "eval");
      c.eval.stability_seeds = e.value("stability_seeds", c.eval.stability_seeds);
      c.eval.stability_images = e.value("stability_images", c.eval.stability_images);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.validate();
}

ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return j.get<ExperimentConfig>();
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto config = parse_config(ss.str());
  const auto base = std::filesystem::absolute(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).lexically_normal().string();
  };
  config.output_dir = resolve(config.output_dir);
  for (auto& img : config.dataset.images) img = resolve(img);
  return config;
}

}  // namespace diffdenoise
