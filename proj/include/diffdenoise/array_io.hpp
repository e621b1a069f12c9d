#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "diffdenoise/error.hpp"
#include "diffdenoise/image.hpp"

namespace diffdenoise {

/// Payload shorter than the header promises.
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Binary image array layout (little-endian):
///   offset 0   8 bytes  magic "DDNARRAY"
///   offset 8   u32      version (1)
///   offset 12  u32      dtype tag (1 = float32)
///   offset 16  u32      height
///   offset 20  u32      width
///   offset 24  height*width float32, row-major
namespace array_format {
inline constexpr char kMagic[8] = {'D', 'D', 'N', 'A', 'R', 'R', 'A', 'Y'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint32_t kFloat32 = 1;
inline constexpr std::size_t kHeaderBytes = 24;
}  // namespace array_format

std::string encode_array(const ImagePatch& image);
ImagePatch decode_array(const std::string& bytes);

void save_array(const std::filesystem::path& path, const ImagePatch& image);
ImagePatch load_array(const std::filesystem::path& path);

/// 8- or 16-bit grayscale PNG; values scaled to [0,1].
ImagePatch load_png(const std::filesystem::path& path);
/// 16-bit grayscale PNG; values clipped to [0,1] first.
void save_png16(const std::filesystem::path& path, const ImagePatch& image);

}  // namespace diffdenoise
