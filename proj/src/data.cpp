#include "diffdenoise/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "diffdenoise/error.hpp"
#include "diffdenoise/rng.hpp"

namespace diffdenoise {

namespace {

constexpr float kPhantomLow = 0.05f;
constexpr float kPhantomHigh = 0.95f;

double soft_inside(double signed_distance_px, double edge_px) {
  return 1.0 / (1.0 + std::exp(signed_distance_px / edge_px));
}

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  /// Approximate signed distance in pixels, negative inside.
  double distance_px(double x, double y, int size) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double xr = dx * cos_t + dy * sin_t;
    const double yr = -dx * sin_t + dy * cos_t;
    const double rho = std::sqrt((xr / a) * (xr / a) + (yr / b) * (yr / b));
    return (rho - 1.0) * std::min(a, b) * size;
  }
};

ImagePatch render_phantom(int size, std::uint64_t seed) {
  Rng rng(seed);
  auto uni = [&rng](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
  auto angle = [&]() { return uni(0.0, std::numbers::pi); };

  const double bg_level = uni(0.08, 0.16);
  const double bg_gx = uni(-0.05, 0.05);
  const double bg_gy = uni(-0.05, 0.05);

  const double body_t = angle();
  const Ellipse body{uni(0.44, 0.56), uni(0.44, 0.56), uni(0.32, 0.44), uni(0.28, 0.40),
                     std::cos(body_t), std::sin(body_t)};
  const double body_level = uni(0.35, 0.5);
  const double ramp_dir = uni(0.0, 2.0 * std::numbers::pi);
  const double ramp_gain = uni(0.08, 0.2);

  struct Inner {
    Ellipse shape;
    double delta;
  };
  std::vector<Inner> inner;
  const int inner_count = 2 + static_cast<int>(rng.uniform() * 3.0);
  for (int i = 0; i < inner_count; ++i) {
    const double t = angle();
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    inner.push_back({Ellipse{body.cx + uni(-0.2, 0.2), body.cy + uni(-0.2, 0.2), uni(0.06, 0.16), uni(0.05, 0.14),
                             std::cos(t), std::sin(t)},
                     sign * uni(0.12, 0.3)});
  }

  struct Ribbon {
    double offset, amplitude, freq, phase, cos_t, sin_t, half_width_px, delta;
  };
  std::vector<Ribbon> ribbons;
  const int ribbon_count = 1 + static_cast<int>(rng.uniform() * 2.0);
  for (int i = 0; i < ribbon_count; ++i) {
    const double t = angle();
    ribbons.push_back({uni(-0.2, 0.2), uni(0.03, 0.1), uni(0.5, 1.5), uni(0.0, 6.28), std::cos(t), std::sin(t),
                       uni(1.0, 2.0), uni(0.12, 0.22) * (rng.uniform() < 0.5 ? -1.0 : 1.0)});
  }

  struct Line {
    double nx, ny, offset, contrast;
  };
  std::vector<Line> lines;
  const int line_count = 2 + static_cast<int>(rng.uniform() * 3.0);
  for (int i = 0; i < line_count; ++i) {
    const double t = uni(0.0, 2.0 * std::numbers::pi);
    lines.push_back({std::cos(t), std::sin(t), uni(-0.25, 0.25), uni(0.06, 0.12) * (rng.uniform() < 0.5 ? -1.0 : 1.0)});
  }

  ImagePatch img(size, size);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double x = (c + 0.5) / size;
      const double y = (r + 0.5) / size;
      double v = bg_level + bg_gx * x + bg_gy * y;

      const double body_w = soft_inside(body.distance_px(x, y, size), 0.7);
      const double ramp = ramp_gain * ((x - body.cx) * std::cos(ramp_dir) + (y - body.cy) * std::sin(ramp_dir));
      v = (1.0 - body_w) * v + body_w * (body_level + ramp);

      for (const auto& s : inner) v += body_w * s.delta * soft_inside(s.shape.distance_px(x, y, size), 0.6);

      for (const auto& rb : ribbons) {
        const double dx = x - 0.5;
        const double dy = y - 0.5;
        const double along = dx * rb.cos_t + dy * rb.sin_t;
        const double across = -dx * rb.sin_t + dy * rb.cos_t;
        const double centre = rb.offset + rb.amplitude * std::sin(2.0 * std::numbers::pi * rb.freq * along + rb.phase);
        const double d_px = std::fabs(across - centre) * size - rb.half_width_px;
        v += body_w * rb.delta * soft_inside(d_px, 0.5);
      }

      for (const auto& ln : lines) {
        const double d_px = ((x - 0.5) * ln.nx + (y - 0.5) * ln.ny - ln.offset) * size;
        v += body_w * ln.contrast * std::exp(-0.5 * d_px * d_px / (0.6 * 0.6));
      }
      img(r, c) = std::clamp(static_cast<float>(v), kPhantomLow, kPhantomHigh);
    }
  }
  return img;
}

}  // namespace

std::vector<ImagePatch> generate_phantoms(int count, int size, std::uint64_t seed) {
  if (count < 1) throw ConfigError("phantom count must be >= 1");
  if (size < 32) throw ConfigError("phantom size must be >= 32");
  std::vector<ImagePatch> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(render_phantom(size, derive_seed(seed, static_cast<std::uint64_t>(i))));
  return out;
}

ImagePatch normalize_unit_range(const ImagePatch& image) {
  const float lo = image.min_value();
  const float hi = image.max_value();
  if (!(hi > lo)) throw DomainError("cannot normalize a constant image");
  ImagePatch out = image;
  const double scale = 1.0 / (static_cast<double>(hi) - lo);
  for (float& v : out.values()) v = static_cast<float>((static_cast<double>(v) - lo) * scale);
  return out;
}

std::vector<ImagePatch> patchify(const ImagePatch& image, int patch_size, int stride) {
  if (patch_size < ImagePatch::kMinSide) throw ConfigError("patch size below minimum");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  std::vector<ImagePatch> out;
  for (int top = 0; top + patch_size <= image.height(); top += stride) {
    for (int left = 0; left + patch_size <= image.width(); left += stride) {
      out.push_back(crop(image, top, left, patch_size, patch_size));
    }
  }
  return out;
}

std::vector<ImagePatch> normalize_and_patchify(const ImagePatch& image, int patch_size, int stride) {
  return patchify(normalize_unit_range(image), patch_size, stride);
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw FormatError("unknown split '" + name + "'");
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& e : entries) {
    items.push_back({{"patch_id", e.patch_id}, {"clean", e.clean_path}, {"noisy", e.noisy_path}, {"noise", e.spec}});
  }
  return {{"split", to_string(split)}, {"source_fingerprint", source_fingerprint}, {"entries", items}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  try {
    DatasetManifest m;
    m.split = parse_split(j.at("split").get<std::string>());
    m.source_fingerprint = j.at("source_fingerprint").get<std::string>();
    for (const auto& item : j.at("entries")) {
      m.entries.push_back({item.at("patch_id").get<std::string>(), item.at("clean").get<std::string>(),
                           item.at("noisy").get<std::string>(), item.at("noise").get<NoiseSpec>()});
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  }
}

void DatasetManifest::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest parse error: ") + e.what());
  }
}

void DatasetManifest::verify_files(const std::filesystem::path& base) const {
  for (const auto& e : entries) {
    for (const auto& rel : {e.clean_path, e.noisy_path}) {
      if (!std::filesystem::exists(base / rel)) throw FormatError("manifest references missing file " + rel);
    }
  }
}

const std::vector<std::string>& SplitAssignment::of(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return train;
}

SplitAssignment assign_splits(const std::vector<std::string>& ids, SplitCounts counts, std::uint64_t seed) {
  if (counts.train < 0 || counts.val < 0 || counts.test < 0) throw ConfigError("split counts must be >= 0");
  if (static_cast<std::size_t>(counts.total()) > ids.size()) {
    throw ConfigError("split counts exceed available patches (" + std::to_string(ids.size()) + ")");
  }
  std::vector<std::string> order = ids;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.next_u64() % i);
    std::swap(order[i - 1], order[j]);
  }
  SplitAssignment out;
  auto it = order.begin();
  out.train.assign(it, it + counts.train);
  it += counts.train;
  out.val.assign(it, it + counts.val);
  it += counts.val;
  out.test.assign(it, it + counts.test);
  for (auto* v : {&out.train, &out.val, &out.test}) std::sort(v->begin(), v->end());
  return out;
}

std::string patch_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "p%05d", index);
  return buf;
}

}  // namespace diffdenoise
