#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffdenoise/image.hpp"
#include "diffdenoise/rng.hpp"

namespace diffdenoise {

enum class NoiseFamily { gaussian, poisson, gamma };

std::string_view to_string(NoiseFamily family);
NoiseFamily parse_noise_family(std::string_view name);

/// One synthetic noise regime. Only the parameters of `family` are read.
struct NoiseSpec {
  NoiseFamily family = NoiseFamily::gaussian;
  double sigma = 6.0 / 255.0;  ///< Gaussian std, intensity units
  double lam = 200.0;          ///< Poisson scale: x' = P(x * lam) / lam
  double alpha = 100.0;        ///< Gamma concentration
  double beta = 100.0;         ///< Gamma rate
  double corr_sigma = 0.0;     ///< std of the blur kernel in pixels; 0 = i.i.d.
  std::uint64_t seed = 0;

  /// Throws ConfigError for a non-positive parameter of the selected family
  /// or a negative corr_sigma.
  void validate() const;
  bool correlated() const noexcept { return corr_sigma > 0.0; }

  friend bool operator==(const NoiseSpec&, const NoiseSpec&) = default;
};

void to_json(nlohmann::json& j, const NoiseSpec& spec);
void from_json(const nlohmann::json& j, NoiseSpec& spec);

struct NoisyPair {
  ImagePatch clean;
  ImagePatch noisy;
  NoiseSpec spec;
};

/// Pixel-wise independent noise. Gaussian is additive, Poisson is
/// P(x*lam)/lam, Gamma is multiplicative x*G(alpha, beta). Output is not clipped.
ImagePatch add_iid_noise(const ImagePatch& clean, const NoiseSpec& spec);

/// Spatially correlated noise: blur an i.i.d. noise field, rescale it to the
/// power of the unblurred field, then mix with a second i.i.d. field at 1/sqrt(2).
ImagePatch add_correlated_noise(const ImagePatch& clean, const NoiseSpec& spec);

/// Dispatches on spec.corr_sigma.
ImagePatch add_noise(const ImagePatch& clean, const NoiseSpec& spec);
NoisyPair make_noisy_pair(const ImagePatch& clean, const NoiseSpec& spec);

/// Normalized sampled Gaussian, length 2*radius+1.
std::vector<double> gaussian_kernel(double sigma, int radius);
int default_kernel_radius(double sigma);

/// Separable convolution with half-sample reflect ("dcba|abcd|dcba") boundaries.
ImagePatch blur_reflect(const ImagePatch& field, const std::vector<double>& kernel);

/// Zero-mean noise field of the given family, drawn from `rng`.
/// For Poisson and Gamma this is (sampled noisy - clean).
ImagePatch sample_noise_field(const ImagePatch& clean, const NoiseSpec& spec, Rng& rng);

/// The correlated-noise recipe on explicit fields; `kernel` may be the
/// single-tap identity {1.0}.
ImagePatch mix_correlated(const ImagePatch& first, const ImagePatch& second,
                          const std::vector<double>& kernel);

struct Autocorrelation {
  std::vector<double> along_rows;  ///< index = horizontal lag
  std::vector<double> along_cols;  ///< index = vertical lag
};

/// Normalized empirical autocorrelation at lags 0..max_lag along both axes.
/// Throws DomainError for a constant field.
Autocorrelation noise_autocorrelation(const ImagePatch& noise, int max_lag);

}  // namespace diffdenoise
