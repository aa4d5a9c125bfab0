#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <utility>
#include <vector>

namespace fedsim {

/// Derives an independent stream seed from (master, label, index).
/// Every consumer of randomness gets its own stream so that adding or
/// reordering consumers never perturbs the others.
std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                          std::uint64_t index = 0);

/// Seeded random source. The engine is std::mt19937_64, whose output
/// sequence the standard pins down; the distributions are implemented
/// here because the standard library leaves theirs implementation-defined
/// and results must be reproducible bit-for-bit.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double next_double() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + next_double() * (hi - lo); }

  /// Standard normal via Box-Muller.
  double normal();

  /// Gamma(shape, 1) via Marsaglia-Tsang squeeze; shape > 0.
  double gamma(double shape);

  /// Symmetric Dirichlet(alpha) over n components; entries strictly positive.
  std::vector<double> dirichlet(double alpha, std::size_t n);

  /// Uniform integer in [0, n); n must be positive. Rejection-sampled,
  /// so it is exactly uniform.
  std::size_t below(std::size_t n);

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace fedsim
