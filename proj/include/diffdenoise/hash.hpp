#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace diffdenoise {

/// Lowercase hex SHA-256 digests.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::string_view bytes);
  Sha256& update(std::span<const unsigned char> bytes);
  std::string hex_digest();

 private:
  void* ctx_;
};

}  // namespace diffdenoise
