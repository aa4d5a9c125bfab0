#include "fedsim/rng.hpp"

#include <cmath>
#include <numbers>

#include "fedsim/error.hpp"

namespace fedsim {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                          std::uint64_t index) {
  std::uint64_t s = splitmix64(master);
  s = splitmix64(s ^ fnv1a(label));
  s = splitmix64(s ^ index);
  return s;
}

double Rng::normal() {
  const double u1 = 1.0 - next_double();  // (0, 1], keeps log finite
  const double u2 = next_double();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) {
    throw InputError("gamma shape must be positive");
  }
  if (shape < 1.0) {
    // Boost to shape+1 and scale back by U^(1/shape).
    double u;
    do {
      u = next_double();
    } while (u <= 0.0);
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = next_double();
    if (u < 1.0 - 0.0331 * (x * x) * (x * x)) {
      return d * v;
    }
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) {
      return d * v;
    }
  }
}

std::vector<double> Rng::dirichlet(double alpha, std::size_t n) {
  if (n == 0) {
    throw InputError("dirichlet needs at least one component");
  }
  std::vector<double> out(n);
  double sum = 0.0;
  for (auto& v : out) {
    do {
      v = gamma(alpha);
    } while (v <= 0.0);  // redraw on underflow so normalization is safe
    sum += v;
  }
  for (auto& v : out) {
    v /= sum;
  }
  return out;
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) {
    throw InputError("below(0) is undefined");
  }
  const std::uint64_t limit =
      std::uint64_t(-1) - std::uint64_t(-1) % static_cast<std::uint64_t>(n);
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return static_cast<std::size_t>(r % static_cast<std::uint64_t>(n));
}

}  // namespace fedsim
