#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace diffdenoise {

/// Row-major single-channel float image, intensities nominally in [0,1].
///
/// Both sides must be at least kMinSide pixels. Values are not clipped;
/// noisy images and residuals routinely leave [0,1].
class ImagePatch {
 public:
  static constexpr int kMinSide = 16;

  ImagePatch() = default;
  ImagePatch(int height, int width, float fill = 0.0f);
  ImagePatch(int height, int width, std::vector<float> data);

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float& operator()(int row, int col) noexcept { return data_[static_cast<std::size_t>(row) * width_ + col]; }
  float operator()(int row, int col) const noexcept {
    return data_[static_cast<std::size_t>(row) * width_ + col];
  }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  bool same_shape(const ImagePatch& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_;
  }
  bool all_finite() const noexcept;
  float min_value() const;
  float max_value() const;
  double mean() const;

  friend bool operator==(const ImagePatch&, const ImagePatch&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<float> data_;
};

/// Throws ShapeError naming `what` when the shapes differ.
void require_same_shape(const ImagePatch& a, const ImagePatch& b, const char* what);

ImagePatch operator+(const ImagePatch& a, const ImagePatch& b);
ImagePatch operator-(const ImagePatch& a, const ImagePatch& b);
ImagePatch operator*(const ImagePatch& a, float s);

/// Mean of the squared values.
double mean_square(const ImagePatch& a);

/// Row-major extraction of a sub-window.
ImagePatch crop(const ImagePatch& src, int top, int left, int height, int width);

}  // namespace diffdenoise
