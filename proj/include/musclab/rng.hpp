#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "musclab/errors.hpp"

namespace musclab {

// Deterministic generator used everywhere randomness is needed. All sampling
// routines are hand-rolled on top of splitmix64 so that results are
// bit-identical across platforms and standard library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller without the cached second draw; two uniforms per sample keeps
  // the stream layout easy to reason about.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Marsaglia-Tsang squeeze for shape >= 1, boosted for shape < 1.
  double gamma(double shape) {
    if (shape <= 0.0) throw ConfigError("gamma shape must be positive");
    if (shape < 1.0) {
      const double u = uniform_positive();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform_positive();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
    }
  }

  double beta(double a, double b) {
    const double x = gamma(a);
    const double y = gamma(b);
    return x / (x + y);
  }

  // Inverse-CDF draw; probabilities must sum to ~1 (the tail absorbs
  // floating-point slack).
  int categorical(std::span<const double> probs) {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i) {
      const int j = uniform_int(i + 1);
      std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
    }
    return p;
  }

  // Independent child stream for (seed, stream-id); used so that e.g. the
  // per-role corpus draws never alias the training shuffles.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    Rng r(seed ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
    r.next_u64();
    return r.next_u64();
  }

 private:
  double uniform_positive() {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return u;
  }

  std::uint64_t state_;
};

}  // namespace musclab
