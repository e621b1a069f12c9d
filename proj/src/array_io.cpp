#include "diffdenoise/array_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <vector>

namespace diffdenoise {

namespace {

static_assert(std::endian::native == std::endian::little, "array format I/O assumes a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t offset) {
  std::uint32_t v = 0;
  std::memcpy(&v, in.data() + offset, 4);
  return v;
}

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

std::string encode_array(const ImagePatch& image) {
  std::string out;
  out.reserve(array_format::kHeaderBytes + image.size() * 4);
  out.append(array_format::kMagic, 8);
  put_u32(out, array_format::kVersion);
  put_u32(out, array_format::kFloat32);
  put_u32(out, static_cast<std::uint32_t>(image.height()));
  put_u32(out, static_cast<std::uint32_t>(image.width()));
  out.append(reinterpret_cast<const char*>(image.values().data()), image.size() * sizeof(float));
  return out;
}

ImagePatch decode_array(const std::string& bytes) {
  if (bytes.size() < array_format::kHeaderBytes) throw TruncatedError("array header truncated");
  if (std::memcmp(bytes.data(), array_format::kMagic, 8) != 0) throw FormatError("bad array magic bytes");
  const auto version = get_u32(bytes, 8);
  if (version != array_format::kVersion) throw FormatError("unsupported array version " + std::to_string(version));
  const auto dtype = get_u32(bytes, 12);
  if (dtype != array_format::kFloat32) throw FormatError("unsupported array dtype tag " + std::to_string(dtype));
  const auto height = get_u32(bytes, 16);
  const auto width = get_u32(bytes, 20);
  if (height > (1u << 16) || width > (1u << 16)) throw FormatError("implausible array shape");
  const std::size_t count = static_cast<std::size_t>(height) * width;
  const std::size_t expected = array_format::kHeaderBytes + count * sizeof(float);
  if (bytes.size() < expected) {
    throw TruncatedError("array payload truncated: " + std::to_string(bytes.size()) + " of " +
                         std::to_string(expected) + " bytes");
  }
  if (bytes.size() > expected) throw FormatError("array payload has trailing bytes");
  std::vector<float> data(count);
  std::memcpy(data.data(), bytes.data() + array_format::kHeaderBytes, count * sizeof(float));
  return ImagePatch(static_cast<int>(height), static_cast<int>(width), std::move(data));
}

void save_array(const std::filesystem::path& path, const ImagePatch& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  const std::string bytes = encode_array(image);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

ImagePatch load_array(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_array(ss.str());
}

ImagePatch load_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw FormatError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("malformed png " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if ((color & PNG_COLOR_MASK_COLOR) != 0 || color == PNG_COLOR_TYPE_PALETTE) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  if ((color & PNG_COLOR_MASK_ALPHA) != 0) png_set_strip_alpha(png);
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<unsigned char> raw(rowbytes * static_cast<std::size_t>(height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int r = 0; r < height; ++r) rows[static_cast<std::size_t>(r)] = raw.data() + rowbytes * r;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  ImagePatch out(height, width);
  for (int r = 0; r < height; ++r) {
    const unsigned char* row = rows[static_cast<std::size_t>(r)];
    for (int c = 0; c < width; ++c) {
      if (depth == 16) {
        std::uint16_t v = 0;
        std::memcpy(&v, row + 2 * c, 2);
        out(r, c) = static_cast<float>(v) / 65535.0f;
      } else {
        out(r, c) = static_cast<float>(row[c]) / 255.0f;
      }
    }
  }
  return out;
}

void save_png16(const std::filesystem::path& path, const ImagePatch& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw FormatError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw FormatError("png encode failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width()), static_cast<png_uint_32>(image.height()), 16,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_set_swap(png);
  std::vector<std::uint16_t> row(static_cast<std::size_t>(image.width()));
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      const float v = std::clamp(image(r, c), 0.0f, 1.0f);
      row[static_cast<std::size_t>(c)] = static_cast<std::uint16_t>(std::lround(v * 65535.0f));
    }
    png_write_row(png, reinterpret_cast<png_const_bytep>(row.data()));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace diffdenoise
