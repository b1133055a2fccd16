#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "avo/tape.hpp"

namespace avo {

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

/// Seeded random source.
///
/// The bit stream comes from std::mt19937_64, whose output sequence is fixed
/// by the C++ standard, so it is identical on every conforming platform.
/// Uniforms take the top 53 bits of one draw: u = (x >> 11) * 2^-53 in [0, 1).
/// Standard normals use the Box-Muller transform on (1 - u1, u2), returning
/// the cosine branch first and caching the sine branch for the next call.
/// std::normal_distribution is deliberately not used because its algorithm
/// is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  double normal();
  void fill_normal(std::span<double> out);
  std::vector<double> standard_normal(std::size_t d);

  /// Independent child stream; the child seed is a SplitMix64 mix of the
  /// parent seed and `stream`.
  Rng split(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

/// d i.i.d. standard-normal draws.
std::vector<double> draw_standard_normal(Rng& rng, std::size_t d);

/// Diagonal Gaussian with per-dimension standard deviations.
class DiagGaussian {
 public:
  DiagGaussian(std::vector<double> mu, std::vector<double> sigma);
  static DiagGaussian standard(std::size_t d);

  std::size_t dim() const { return mu_.size(); }
  const std::vector<double>& mu() const { return mu_; }
  const std::vector<double>& sigma() const { return sigma_; }

  double log_prob(std::span<const double> z) const;
  std::vector<double> sample_reparam(std::span<const double> eps) const;
  std::vector<double> sample(Rng& rng) const;

 private:
  std::vector<double> mu_;
  std::vector<double> sigma_;
};

/// Raw diagonal-Gaussian log density used by every double-precision path.
double gaussian_log_prob(std::span<const double> mu,
                         std::span<const double> sigma,
                         std::span<const double> z);

/// Diagonal Gaussian whose parameters live on a tape.
/// `width` is the row length when mu and sigma hold a batch of rows; 0 means
/// a single row.
struct GaussianVar {
  Var mu;
  Var sigma;
  std::size_t width = 0;

  std::size_t dim() const { return width ? width : mu.size(); }
};

/// Constant copy of `g` repeated for `batch` rows.
GaussianVar constant_gaussian(Tape& tape, const DiagGaussian& g,
                              std::size_t batch = 1);

/// Sum_d [-log sigma_d - log(2 pi)/2 - (z_d - mu_d)^2 / (2 sigma_d^2)] per
/// row, differentiable through mu, sigma and z.
Var log_prob(const GaussianVar& g, Var z);
/// mu + sigma * eps.
Var sample_reparam(const GaussianVar& g, Var eps);

}  // namespace avo
