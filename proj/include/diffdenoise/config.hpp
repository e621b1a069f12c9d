#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffdenoise/bsn.hpp"
#include "diffdenoise/data.hpp"
#include "diffdenoise/diffusion.hpp"
#include "diffdenoise/distill.hpp"
#include "diffdenoise/noise.hpp"
#include "diffdenoise/srds.hpp"

namespace diffdenoise {

enum class Normalization { per_image, per_dataset };

struct DatasetConfig {
  std::string source = "phantom";  ///< "phantom" or "images"
  int count = 64;                  ///< phantom count
  int size = 64;                   ///< phantom side
  std::vector<std::string> images; ///< PNG or array files, relative to the config file
  int patch_size = 64;
  int stride = 64;
  Normalization normalization = Normalization::per_image;
  SplitCounts splits{48, 0, 16};
};

/// One noise regime and the experiments run on it.
struct RegimeConfig {
  std::string name;
  NoiseSpec noise;
  int blind_spot_size = 0;  ///< 0 picks the default for the noise correlation
  int iterations = 1;
  bool ablation = false;   ///< SRDS x KD grid on iteration 1
  bool stability = false;  ///< per-seed sampling spread on iteration 1
};

struct SrdsConfig {
  int steps = 50;
  SampleMode mode = SampleMode::srds;
};

struct EvalConfig {
  int stability_seeds = 20;
  int stability_images = 4;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  DatasetConfig dataset;
  std::vector<RegimeConfig> regimes;
  BsnConfig bsn;
  DiffusionConfig diffusion;
  SrdsConfig srds;
  DistillConfig distill;
  EvalConfig eval;

  /// Throws ConfigError on any inconsistency.
  void validate() const;
  const RegimeConfig& regime(const std::string& name) const;
  /// BSN settings for a regime with the blind spot resolved.
  BsnConfig bsn_for(const RegimeConfig& regime) const;
  /// Hash of the canonical (key-sorted) JSON form, output_dir excluded.
  std::string hash() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Rejects unknown keys at every level and validates the result.
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Parses a JSON config file. Relative image paths and output_dir are resolved
/// against the file's directory.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text);

}  // namespace diffdenoise
