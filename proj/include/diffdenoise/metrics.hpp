#pragma once

#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "diffdenoise/image.hpp"

namespace diffdenoise {

/// Returned by psnr() for identical images.
inline constexpr double kPsnrInfinite = std::numeric_limits<double>::infinity();

/// 10*log10(range^2 / MSE) in dB.
double psnr(const ImagePatch& reference, const ImagePatch& test, double data_range = 1.0);

/// Mean SSIM over all fully-covered 11x11 Gaussian windows (sigma 1.5,
/// K1 = 0.01, K2 = 0.03, population covariances).
double ssim(const ImagePatch& reference, const ImagePatch& test, double data_range = 1.0);

/// Two-sided Wilcoxon signed-rank p-value for paired scores. Zero differences
/// are discarded; with none left the result is 1. Exact null distribution for
/// n <= 50 without ties, tie-corrected normal approximation otherwise.
double paired_test(std::span<const double> a, std::span<const double> b);

double mean_of(std::span<const double> v);
/// Sample standard deviation (n-1 denominator).
double stddev_of(std::span<const double> v);

/// Per-image scores for several methods over one image set.
class MetricReport {
 public:
  MetricReport() = default;
  explicit MetricReport(std::vector<std::string> image_ids) : image_ids_(std::move(image_ids)) {}

  /// Adds a method column; lengths must equal the image count.
  void add_method(const std::string& method, std::vector<double> psnr, std::vector<double> ssim);

  const std::vector<std::string>& image_ids() const noexcept { return image_ids_; }
  const std::vector<std::string>& methods() const noexcept { return methods_; }
  bool has_method(const std::string& method) const { return psnr_.count(method) != 0; }
  const std::vector<double>& psnr_of(const std::string& method) const;
  const std::vector<double>& ssim_of(const std::string& method) const;
  double mean_psnr(const std::string& method) const;
  double mean_ssim(const std::string& method) const;
  double psnr_p_value(const std::string& a, const std::string& b) const;

  /// One row per image: image_id, <method>_psnr, <method>_ssim, ...
  std::string to_csv() const;
  static MetricReport from_csv(const std::string& text);
  void save_csv(const std::filesystem::path& path) const;
  static MetricReport load_csv(const std::filesystem::path& path);

  /// Plain-text table: method, mean/std PSNR, mean SSIM, p-value against the best.
  std::string summary() const;

 private:
  std::vector<std::string> image_ids_;
  std::vector<std::string> methods_;
  std::map<std::string, std::vector<double>> psnr_;
  std::map<std::string, std::vector<double>> ssim_;
};

}  // namespace diffdenoise
