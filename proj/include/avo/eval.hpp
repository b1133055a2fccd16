#pragma once

// Evaluation: negative-KL estimator, AIS log-partition oracle, density
// grids and mode coverage.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

#include "avo/chain.hpp"
#include "avo/dist.hpp"
#include "avo/energy.hpp"

namespace avo {

struct Bounds2D {
  double xmin = -4, xmax = 4, ymin = -4, ymax = 4;
  void validate() const;
};

/// Values on an nx-by-ny lattice of cell centres, stored row by row with
/// y increasing: values[iy * nx + ix].
struct Grid2D {
  Bounds2D bounds;
  std::size_t nx = 0, ny = 0;
  std::vector<double> values;

  Grid2D() = default;
  Grid2D(Bounds2D b, std::size_t nx, std::size_t ny);

  double x_center(std::size_t ix) const;
  double y_center(std::size_t iy) const;
  double& at(std::size_t ix, std::size_t iy) { return values[iy * nx + ix]; }
  double at(std::size_t ix, std::size_t iy) const { return values[iy * nx + ix]; }
  /// Cell containing (x, y), or false when outside the bounds.
  bool locate(double x, double y, std::size_t& ix, std::size_t& iy) const;
  /// Index of the largest value.
  std::array<std::size_t, 2> argmax() const;
  /// Rescaled copy whose values sum to 1.
  Grid2D normalized() const;
};

/// CSV layout:
///   # grid2d xmin=<v> xmax=<v> ymin=<v> ymax=<v> nx=<n> ny=<n>
///   ny lines of nx comma-separated values, lowest y first.
void write_csv(const Grid2D& g, std::ostream& os);
Grid2D read_grid_csv(std::istream& is);
/// Plain PGM (P2), 8-bit, min-max scaled, highest y on the top row.
void write_pgm(const Grid2D& g, std::ostream& os);

/// Values at n equally spaced nodes z_i = lo + i (hi - lo) / (n - 1).
struct Grid1D {
  double lo = 0, hi = 0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double node(std::size_t i) const;
  double trapezoid() const;
  /// Interior strict local maxima.
  std::vector<std::size_t> local_maxima() const;
};

/// Two columns: z,value.
void write_csv(const Grid1D& g, std::ostream& os);

/// 0.5 * sum |p - q| after normalising both grids to unit mass.
double total_variation(const Grid2D& p, const Grid2D& q);

/// exp(log f) at cell centres.
Grid2D density_grid(const EnergySpec& target, Bounds2D bounds, std::size_t nx,
                    std::size_t ny);
/// Histogram of samples, normalised to sum 1 over in-bounds draws.
Grid2D histogram_grid(std::span<const std::vector<double>> samples,
                      Bounds2D bounds, std::size_t nx, std::size_t ny);
Grid2D histogram_grid(std::span<const std::array<double, 2>> samples,
                      Bounds2D bounds, std::size_t nx, std::size_t ny);
/// Histogram of n_samples forward draws from the chain.
Grid2D density_grid(const HierarchicalChain& chain, Bounds2D bounds,
                    std::size_t nx, std::size_t ny, std::size_t n_samples,
                    Rng& rng);

/// n forward draws of z_T.
std::vector<std::vector<double>> sample_final(const HierarchicalChain& chain,
                                              std::size_t n, Rng& rng,
                                              std::span<const double> cond = {});

/// Exact posterior p(z | x) of the noise model on a z lattice, normalised by
/// the trapezoid rule.
Grid1D true_posterior_grid(const NoiseDecoder& theta, std::array<double, 2> x,
                           double z_lo, double z_hi, std::size_t resolution);

/// Fraction of samples whose nearest centre lies within `radius`, per centre.
std::vector<double> mode_coverage(std::span<const std::vector<double>> samples,
                                  std::span<const std::vector<double>> centers,
                                  double radius);

struct EstimateOptions {
  /// Worker threads; results do not depend on this value.
  std::size_t threads = 1;
};

struct NegKlEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

/// Importance-weighted estimate of E_q[log f(z_T) - log q(z_T)]:
/// (1/N) sum_n [ log f(z_T^n) - log (1/K) sum_k q_joint / r_joint ],
/// the inner draws coming from the backward chain given z_T^n.
NegKlEstimate negative_kl_estimate(const HierarchicalChain& chain,
                                   const DiagGaussian& q0,
                                   const EnergySpec& target, std::size_t N,
                                   std::size_t K, Rng& rng,
                                   const EstimateOptions& options = {});

struct AisOptions {
  std::size_t n_steps = 1000;
  std::size_t n_chains = 128;
  std::size_t mh_steps_per_level = 3;
  double step_size = 0.25;
};

struct AisResult {
  double log_z = 0.0;
  /// Chains that accepted no proposal at all.
  std::size_t zero_acceptance_chains = 0;
  double acceptance_rate = 0.0;
};

/// Annealed importance sampling along the geometric path from f0 to target
/// with random-walk Metropolis-Hastings moves at each level.
AisResult ais_log_z(const DiagGaussian& f0, const EnergySpec& target,
                    const AisOptions& options, Rng& rng);

struct EvalReport {
  double negative_kl_shifted = 0.0;
  double negative_kl_std_error = 0.0;
  double log_z = 0.0;
  double negative_kl = 0.0;  // shifted value minus log_z
  std::vector<double> mode_fractions;
  std::size_t n_samples = 0;
  std::size_t k_inner = 0;
};

}  // namespace avo
