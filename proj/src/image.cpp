#include "diffdenoise/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "diffdenoise/error.hpp"

namespace diffdenoise {

namespace {

void check_dims(int height, int width) {
  if (height < ImagePatch::kMinSide || width < ImagePatch::kMinSide) {
    throw ShapeError("image must be at least " + std::to_string(ImagePatch::kMinSide) + "x" +
                     std::to_string(ImagePatch::kMinSide) + ", got " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
}

}  // namespace

ImagePatch::ImagePatch(int height, int width, float fill)
    : height_(height), width_(width) {
  check_dims(height, width);
  data_.assign(static_cast<std::size_t>(height) * width, fill);
}

ImagePatch::ImagePatch(int height, int width, std::vector<float> data)
    : height_(height), width_(width), data_(std::move(data)) {
  check_dims(height, width);
  if (data_.size() != static_cast<std::size_t>(height) * width) {
    throw ShapeError("payload of " + std::to_string(data_.size()) + " values does not match " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
}

bool ImagePatch::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

float ImagePatch::min_value() const {
  if (data_.empty()) throw ShapeError("min of empty image");
  return *std::min_element(data_.begin(), data_.end());
}

float ImagePatch::max_value() const {
  if (data_.empty()) throw ShapeError("max of empty image");
  return *std::max_element(data_.begin(), data_.end());
}

double ImagePatch::mean() const {
  if (data_.empty()) throw ShapeError("mean of empty image");
  double acc = 0.0;
  for (float v : data_) acc += v;
  return acc / static_cast<double>(data_.size());
}

void require_same_shape(const ImagePatch& a, const ImagePatch& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()));
  }
}

ImagePatch operator+(const ImagePatch& a, const ImagePatch& b) {
  require_same_shape(a, b, "add");
  ImagePatch out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i];
  return out;
}

ImagePatch operator-(const ImagePatch& a, const ImagePatch& b) {
  require_same_shape(a, b, "subtract");
  ImagePatch out = a;
  auto o = out.values();
  auto v = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= v[i];
  return out;
}

ImagePatch operator*(const ImagePatch& a, float s) {
  ImagePatch out = a;
  for (float& v : out.values()) v *= s;
  return out;
}

double mean_square(const ImagePatch& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += static_cast<double>(v) * v;
  return acc / static_cast<double>(a.size());
}

ImagePatch crop(const ImagePatch& src, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > src.height() || left + width > src.width()) {
    throw ShapeError("crop window outside image");
  }
  ImagePatch out(height, width);
  for (int r = 0; r < height; ++r) {
    std::copy_n(src.values().begin() + static_cast<std::ptrdiff_t>(top + r) * src.width() + left, width, &out(r, 0));
  }
  return out;
}

}  // namespace diffdenoise
