#pragma once

#include <cstdint>
#include <random>

namespace diffdenoise {

/// Pinned random source for every noise realization in the project.
///
/// Bits come from std::mt19937_64, whose output sequence is fixed by the C++
/// standard. The standard library distributions are implementation-defined, so
/// all transforms (uniform, normal, Poisson, Gamma) are implemented here:
///   uniform  : top 53 bits scaled to [0,1)
///   normal   : Box-Muller, second variate cached
///   poisson  : multiplication method below mean 10, PTRS (Hoermann 1993) above
///   gamma    : Marsaglia-Tsang, boosted with U^(1/a) for shape < 1
class Rng {
 public:
  static constexpr const char* kAlgorithm = "mt19937_64/box-muller/ptrs/marsaglia-tsang";

  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  /// Uniform on (0,1], never zero.
  double uniform_open();
  double normal();
  std::int64_t poisson(double mean);
  /// Gamma with the given shape (concentration) and unit scale.
  double gamma(double shape);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// SplitMix64 finalizer; used to derive independent child seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t salt);
std::uint64_t derive_seed(std::uint64_t parent, const char* label);

}  // namespace diffdenoise
