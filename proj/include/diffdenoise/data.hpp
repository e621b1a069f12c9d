#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffdenoise/image.hpp"
#include "diffdenoise/noise.hpp"

namespace diffdenoise {

/// Smooth anatomical-style test images: a soft-edged body ellipse with an
/// intensity ramp, inner structures, curved ribbons and thin line detail.
/// Values lie in [0.05, 0.95]; output is a pure function of the arguments.
std::vector<ImagePatch> generate_phantoms(int count, int size, std::uint64_t seed);

/// Linear map of the image's min/max onto [0,1]. Throws DomainError on a
/// constant image.
ImagePatch normalize_unit_range(const ImagePatch& image);

/// Normalizes the whole image, then tiles it; partial edge patches are dropped.
std::vector<ImagePatch> normalize_and_patchify(const ImagePatch& image, int patch_size, int stride);

/// Tiles without normalizing (per-dataset normalization path).
std::vector<ImagePatch> patchify(const ImagePatch& image, int patch_size, int stride);

enum class Split { train, val, test };
std::string to_string(Split split);
Split parse_split(const std::string& name);

struct ManifestEntry {
  std::string patch_id;
  std::string clean_path;  ///< relative to the manifest's directory
  std::string noisy_path;
  NoiseSpec spec;
};

struct DatasetManifest {
  Split split = Split::train;
  std::vector<ManifestEntry> entries;
  std::string source_fingerprint;

  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);

  void save(const std::filesystem::path& path) const;
  static DatasetManifest load(const std::filesystem::path& path);
  /// Throws FormatError if a referenced file is missing or unreadable.
  void verify_files(const std::filesystem::path& base) const;
};

struct SplitCounts {
  int train = 0;
  int val = 0;
  int test = 0;
  int total() const noexcept { return train + val + test; }
};

/// Deterministic shuffle of `ids` into disjoint train/val/test lists.
struct SplitAssignment {
  std::vector<std::string> train, val, test;
  const std::vector<std::string>& of(Split s) const;
};
SplitAssignment assign_splits(const std::vector<std::string>& ids, SplitCounts counts, std::uint64_t seed);

std::string patch_id(int index);

}  // namespace diffdenoise
