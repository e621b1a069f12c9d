#include "diffdenoise/noise.hpp"

#include <cmath>
#include <numbers>

#include "diffdenoise/error.hpp"
#include "diffdenoise/rng.hpp"

namespace diffdenoise {

std::string_view to_string(NoiseFamily family) {
  switch (family) {
    case NoiseFamily::gaussian: return "gaussian";
    case NoiseFamily::poisson: return "poisson";
    case NoiseFamily::gamma: return "gamma";
  }
  return "unknown";
}

NoiseFamily parse_noise_family(std::string_view name) {
  if (name == "gaussian") return NoiseFamily::gaussian;
  if (name == "poisson") return NoiseFamily::poisson;
  if (name == "gamma") return NoiseFamily::gamma;
  throw ConfigError("unknown noise family '" + std::string(name) + "'");
}

void NoiseSpec::validate() const {
  auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  switch (family) {
    case NoiseFamily::gaussian:
      if (!positive(sigma)) throw ConfigError("gaussian noise requires sigma > 0");
      break;
    case NoiseFamily::poisson:
      if (!positive(lam)) throw ConfigError("poisson noise requires lam > 0");
      break;
    case NoiseFamily::gamma:
      if (!positive(alpha) || !positive(beta)) throw ConfigError("gamma noise requires alpha > 0 and beta > 0");
      break;
  }
  if (!std::isfinite(corr_sigma) || corr_sigma < 0.0) throw ConfigError("corr_sigma must be >= 0");
}

void to_json(nlohmann::json& j, const NoiseSpec& spec) {
  j = nlohmann::json{{"family", std::string(to_string(spec.family))}, {"corr_sigma", spec.corr_sigma},
                     {"seed", spec.seed}};
  switch (spec.family) {
    case NoiseFamily::gaussian: j["sigma"] = spec.sigma; break;
    case NoiseFamily::poisson: j["lam"] = spec.lam; break;
    case NoiseFamily::gamma:
      j["alpha"] = spec.alpha;
      j["beta"] = spec.beta;
      break;
  }
}

void from_json(const nlohmann::json& j, NoiseSpec& spec) {
  static const char* const kKeys[] = {"family", "sigma", "lam", "alpha", "beta", "corr_sigma", "seed"};
  if (!j.is_object()) throw ConfigError("noise spec must be an object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    if (!known) throw ConfigError("unknown noise key '" + key + "'");
  }
  spec = NoiseSpec{};
  spec.family = parse_noise_family(j.at("family").get<std::string>());
  if (j.contains("sigma")) spec.sigma = j["sigma"].get<double>();
  if (j.contains("lam")) spec.lam = j["lam"].get<double>();
  if (j.contains("alpha")) spec.alpha = j["alpha"].get<double>();
  if (j.contains("beta")) spec.beta = j["beta"].get<double>();
  if (j.contains("corr_sigma")) spec.corr_sigma = j["corr_sigma"].get<double>();
  if (j.contains("seed")) spec.seed = j["seed"].get<std::uint64_t>();
  spec.validate();
}

ImagePatch sample_noise_field(const ImagePatch& clean, const NoiseSpec& spec, Rng& rng) {
  ImagePatch field(clean.height(), clean.width());
  auto out = field.values();
  auto x = clean.values();
  switch (spec.family) {
    case NoiseFamily::gaussian:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(spec.sigma * rng.normal());
      break;
    case NoiseFamily::poisson:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double rate = std::max(0.0, static_cast<double>(x[i])) * spec.lam;
        const double sampled = static_cast<double>(rng.poisson(rate)) / spec.lam;
        out[i] = static_cast<float>(sampled - x[i]);
      }
      break;
    case NoiseFamily::gamma:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double factor = rng.gamma(spec.alpha) / spec.beta;
        out[i] = static_cast<float>(x[i] * factor - x[i]);
      }
      break;
  }
  return field;
}

ImagePatch add_iid_noise(const ImagePatch& clean, const NoiseSpec& spec) {
  spec.validate();
  if (spec.correlated()) throw ConfigError("add_iid_noise requires corr_sigma == 0");
  Rng rng(spec.seed);
  ImagePatch noisy(clean.height(), clean.width());
  auto out = noisy.values();
  auto x = clean.values();
  switch (spec.family) {
    case NoiseFamily::gaussian:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(x[i] + spec.sigma * rng.normal());
      break;
    case NoiseFamily::poisson:
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double rate = std::max(0.0, static_cast<double>(x[i])) * spec.lam;
        out[i] = static_cast<float>(static_cast<double>(rng.poisson(rate)) / spec.lam);
      }
      break;
    case NoiseFamily::gamma:
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(x[i] * (rng.gamma(spec.alpha) / spec.beta));
      }
      break;
  }
  return noisy;
}

int default_kernel_radius(double sigma) {
  return static_cast<int>(std::ceil(3.0 * sigma));
}

std::vector<double> gaussian_kernel(double sigma, int radius) {
  if (radius < 0) throw ConfigError("kernel radius must be >= 0");
  if (radius == 0) return {1.0};
  if (!(sigma > 0.0)) throw ConfigError("kernel sigma must be > 0");
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

namespace {

int reflect_index(int i, int n) {
  // Half-sample symmetric reflection, periodic with 2n.
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

ImagePatch blur_reflect(const ImagePatch& field, const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  if (kernel.size() % 2 == 0) throw ConfigError("kernel length must be odd");
  const int h = field.height();
  const int w = field.width();
  std::vector<double> tmp(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * field(r, reflect_index(c + k, w));
      }
      tmp[static_cast<std::size_t>(r) * w + c] = acc;
    }
  }
  ImagePatch out(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] *
               tmp[static_cast<std::size_t>(reflect_index(r + k, h)) * w + c];
      }
      out(r, c) = static_cast<float>(acc);
    }
  }
  return out;
}

ImagePatch mix_correlated(const ImagePatch& first, const ImagePatch& second, const std::vector<double>& kernel) {
  require_same_shape(first, second, "mix_correlated");
  ImagePatch blurred = blur_reflect(first, kernel);
  const double target = mean_square(first);
  const double actual = mean_square(blurred);
  const double gain = actual > 0.0 ? std::sqrt(target / actual) : 0.0;
  const double w = 1.0 / std::numbers::sqrt2;
  ImagePatch out(first.height(), first.width());
  auto o = out.values();
  auto b = blurred.values();
  auto s = second.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = static_cast<float>(w * (gain * b[i] + s[i]));
  }
  return out;
}

ImagePatch add_correlated_noise(const ImagePatch& clean, const NoiseSpec& spec) {
  spec.validate();
  if (!spec.correlated()) throw ConfigError("add_correlated_noise requires corr_sigma > 0");
  Rng rng(spec.seed);
  const ImagePatch first = sample_noise_field(clean, spec, rng);
  const ImagePatch second = sample_noise_field(clean, spec, rng);
  const auto kernel = gaussian_kernel(spec.corr_sigma, default_kernel_radius(spec.corr_sigma));
  return clean + mix_correlated(first, second, kernel);
}

ImagePatch add_noise(const ImagePatch& clean, const NoiseSpec& spec) {
  return spec.correlated() ? add_correlated_noise(clean, spec) : add_iid_noise(clean, spec);
}

NoisyPair make_noisy_pair(const ImagePatch& clean, const NoiseSpec& spec) {
  return NoisyPair{clean, add_noise(clean, spec), spec};
}

Autocorrelation noise_autocorrelation(const ImagePatch& noise, int max_lag) {
  if (max_lag < 1) throw ConfigError("max_lag must be >= 1");
  if (max_lag >= noise.height() || max_lag >= noise.width()) throw ConfigError("max_lag exceeds image size");
  const double mu = noise.mean();
  const int h = noise.height();
  const int w = noise.width();
  double var = 0.0;
  for (float v : noise.values()) var += (v - mu) * (v - mu);
  var /= static_cast<double>(noise.size());
  if (!(var > 0.0)) throw DomainError("autocorrelation undefined for a constant field");

  Autocorrelation out;
  out.along_rows.assign(static_cast<std::size_t>(max_lag + 1), 0.0);
  out.along_cols.assign(static_cast<std::size_t>(max_lag + 1), 0.0);
  out.along_rows[0] = 1.0;
  out.along_cols[0] = 1.0;
  for (int lag = 1; lag <= max_lag; ++lag) {
    double acc = 0.0;
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c + lag < w; ++c) acc += (noise(r, c) - mu) * (noise(r, c + lag) - mu);
    }
    out.along_rows[static_cast<std::size_t>(lag)] = acc / (static_cast<double>(h) * (w - lag)) / var;
    acc = 0.0;
    for (int r = 0; r + lag < h; ++r) {
      for (int c = 0; c < w; ++c) acc += (noise(r, c) - mu) * (noise(r + lag, c) - mu);
    }
    out.along_cols[static_cast<std::size_t>(lag)] = acc / (static_cast<double>(h - lag) * w) / var;
  }
  return out;
}

}  // namespace diffdenoise
