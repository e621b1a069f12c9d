#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace diffdenoise {

enum class ModelStage : std::uint32_t { bsn = 1, diffusion = 2, distilled = 3 };

std::string_view to_string(ModelStage stage);

/// Serializable network handle shared by the BSN, diffusion and distilled stages.
///
/// `architecture` holds everything needed to rebuild the module; the
/// fingerprint hashes architecture and training settings. An empty loss
/// history marks a model that was built but never trained.
struct TrainedModel {
  ModelStage stage = ModelStage::bsn;
  nlohmann::json architecture;
  std::string fingerprint;
  std::vector<double> loss_history;
  std::vector<std::pair<std::string, torch::Tensor>> parameters;

  bool trained() const noexcept { return !loss_history.empty(); }

  /// Checkpoint container, little-endian:
  ///   "DDNCKPT1" | u32 version | u32 stage | str architecture-json | str fingerprint
  ///   | u32 n + f64[n] losses | u32 n tensors: (str name, u32 ndim, i64[ndim] dims, f32[] data)
  /// where str = u32 length + bytes.
  std::string encode() const;
  static TrainedModel decode(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static TrainedModel load(const std::filesystem::path& path);
  std::string content_hash() const;
};

/// Copies every named parameter and buffer of `module` as contiguous float32.
std::vector<std::pair<std::string, torch::Tensor>> capture_state(const torch::nn::Module& module);
/// Inverse of capture_state; names and shapes must match exactly.
void restore_state(torch::nn::Module& module, const std::vector<std::pair<std::string, torch::Tensor>>& state);

}  // namespace diffdenoise
