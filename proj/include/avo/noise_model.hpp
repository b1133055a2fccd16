#pragma once

// The biased noise-model comparison: a 1D latent mapped onto a noisy arc in
// the plane by a fixed decoder mean, with a learned decoder standard
// deviation. Three posterior families are compared on the same data.

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "avo/chain.hpp"
#include "avo/energy.hpp"
#include "avo/eval.hpp"
#include "avo/train.hpp"

namespace avo {

enum class NoiseVariant { Iwae, Vae, Avo };

const char* noise_variant_name(NoiseVariant v);
/// Accepts "iwae", "vae" and "avo".
NoiseVariant parse_noise_variant(std::string_view name);

/// The ambiguous observation whose true posterior has a mode in each tail.
inline constexpr std::array<double, 2> kAmbiguousPoint{0.0, -1.0};

struct NoiseModelConfig {
  NoiseVariant variant = NoiseVariant::Iwae;
  std::size_t n_data = 10000;
  std::size_t steps = 5000;
  std::size_t batch = 128;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  /// Standard deviation of the observation noise used to generate data.
  double noise_std = 0.1;

  std::size_t decoder_hidden = 16;
  std::size_t encoder_hidden = 32;
  std::size_t T = 10;
  std::size_t chain_hidden = 32;
  double a = 0.5;
  std::size_t iwae_samples = 500;

  std::size_t checkpoint_every = 500;
  /// Posterior draws at the ambiguous point.
  std::size_t eval_samples = 10000;
  /// Fresh draws from the generating process for the reference histogram.
  std::size_t reference_samples = 100000;
  std::size_t grid_n = 40;
  Bounds2D grid_bounds{-1.6, 1.6, -1.6, 1.6};
  /// Latent quadrature for the learned marginal density.
  double z_lo = -6.0, z_hi = 6.0;
  std::size_t z_nodes = 1201;

  void validate() const;
};

/// Trained generative model plus the posterior family that was used.
struct NoiseModelParams {
  NoiseVariant variant = NoiseVariant::Iwae;
  NoiseDecoder decoder;
  std::optional<GaussianEncoder> encoder;     // VAE
  std::optional<HierarchicalChain> chain;     // AVO, conditioned on x
};

struct NoiseModelResult {
  NoiseModelParams params;
  std::vector<MetricPoint> series;
  /// Final metrics: tv_to_data, q_tail_low, q_tail_high, q_mean and, for the
  /// VAE, encoder_mean and encoder_std at the ambiguous point.
  std::vector<MetricPoint> final;
  Grid2D data_histogram;
  Grid2D learned_density;
  /// Posterior at the ambiguous point under the generating decoder and
  /// under the learned decoder.
  Grid1D true_posterior;
  Grid1D model_posterior;
  /// Density histogram of q(z | x) draws at the ambiguous point.
  Grid1D q_posterior;

  double metric(std::string_view name) const;
};

/// n draws (x1, x2) from the generating process.
std::vector<std::array<double, 2>> generate_noise_data(std::size_t n,
                                                       double noise_std,
                                                       Rng& rng);

/// p(x) = integral of N(z; 0, 1) N(x; mean(z), s(z)) dz at every cell centre,
/// by the trapezoid rule on [z_lo, z_hi].
Grid2D learned_density_grid(const NoiseDecoder& decoder, Bounds2D bounds,
                            std::size_t nx, std::size_t ny, double z_lo,
                            double z_hi, std::size_t z_nodes);

/// Draws from the variant's q(z | x).
std::vector<double> sample_posterior(const NoiseModelParams& params,
                                     std::array<double, 2> x, std::size_t n,
                                     Rng& rng);

/// Density histogram of scalar draws with bins centred on the grid nodes.
Grid1D histogram_1d(std::span<const double> draws, double lo, double hi,
                    std::size_t nodes);

NoiseModelResult fit_noise_model(const NoiseModelConfig& config);

}  // namespace avo
