#pragma once

// Closed-form unnormalized log-targets.
//
// The six toy energies are used as log f~(z) directly: each formula already
// carries its leading minus signs. Kind D is a normalized four-component
// Gaussian mixture and doubles as the four-mode target.

#include <array>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "avo/dist.hpp"
#include "avo/nn.hpp"
#include "avo/tape.hpp"

namespace avo {

/// Slope inside the tanh of the noise-model decoder mean.
inline constexpr double kNoiseEta = 0.75;

/// Per-dimension variance of each component of the four-mode mixture
/// (the mixture is written with covariance 0.2 I).
inline constexpr double kFourModeVariance = 0.2;

/// Decoder standard-deviation network of the noise model: z -> two
/// positive scales, softplus output plus kScaleFloor.
struct NoiseDecoder {
  Dense hidden;
  Dense out;
  Activation act = Activation::Elu;

  static NoiseDecoder init(std::size_t hidden_width, Rng& rng);
  /// Network whose output is the constant `stddev` for every z.
  static NoiseDecoder constant(double stddev, std::size_t hidden_width = 4);

  std::array<double, 2> stddev(double z) const;
  ParamSet params();
};

struct BoundNoiseDecoder {
  BoundDense hidden;
  BoundDense out;
  Activation act = Activation::Elu;

  /// Binds `decoder` whose ParamSet occupies binding[first], binding[first+1].
  static BoundNoiseDecoder from(const TapeBinding& binding, std::size_t first,
                                Activation act);
  /// Non-trainable copy of `decoder` on `tape`.
  static BoundNoiseDecoder constant(Tape& tape, const NoiseDecoder& decoder);
  Var stddev(Var z) const;
};

/// Fixed decoder mean (sin(pi tanh(eta z)), cos(pi tanh(eta z))). The Var
/// form maps B latents to B rows of two.
std::array<double, 2> noise_mean(double z);
Var noise_mean(Var z);

/// log N(z; 0, 1) + sum_i log N(x_i; mean_i(z), s_i(z)).
double noise_model_log_joint(const NoiseDecoder& theta,
                             std::span<const double> x, double z);
Var noise_model_log_joint(const BoundNoiseDecoder& theta, Var x, Var z);

enum class EnergyKind { A, B, C, D, E, F, Gaussian, NoiseModelPosterior };

class EnergySpec {
 public:
  static EnergySpec toy(EnergyKind kind);
  static EnergySpec four_mode() { return toy(EnergyKind::D); }
  /// log N(z; g) + log_scale.
  static EnergySpec gaussian(DiagGaussian g, double log_scale = 0.0);
  static EnergySpec noise_model_posterior(
      std::shared_ptr<const NoiseDecoder> decoder, std::array<double, 2> x);
  /// "a".."f", "four-mode" (same as "d"), "gaussian" (standard 2D normal).
  static EnergySpec from_name(std::string_view name);

  EnergyKind kind() const { return kind_; }
  std::size_t dim() const;
  std::string name() const;

  double log_density(std::span<const double> z) const;
  /// z holds B rows of length dim(); returns the B per-row log densities.
  Var log_density(Var z) const;

  /// Mixture means for kind D, empty otherwise.
  std::vector<std::vector<double>> mode_centers() const;
  const std::optional<DiagGaussian>& gaussian_params() const {
    return gaussian_;
  }

 private:
  explicit EnergySpec(EnergyKind kind) : kind_(kind) {}
  void check_dim(std::size_t n) const;

  EnergyKind kind_;
  std::optional<DiagGaussian> gaussian_;
  double log_scale_ = 0.0;
  std::shared_ptr<const NoiseDecoder> decoder_;
  std::array<double, 2> x_{};
};

/// Geometric bridge f~_alpha = f~_T^alpha f~_0^(1-alpha), in log space.
class AnnealedTarget {
 public:
  AnnealedTarget(EnergySpec f0, EnergySpec f_final, double alpha);

  double alpha() const { return alpha_; }
  const EnergySpec& initial() const { return f0_; }
  const EnergySpec& final() const { return ft_; }

  double log_density(std::span<const double> z) const;
  Var log_density(Var z) const;

 private:
  EnergySpec f0_;
  EnergySpec ft_;
  double alpha_;
};

double interp_log_density(const AnnealedTarget& t, std::span<const double> z);
Var interp_log_density(const AnnealedTarget& t, Var z);

/// Inverse of softplus, for initialising scale heads.
double inverse_softplus(double y);

}  // namespace avo
