#pragma once

// Hierarchical variational chain built from gated stochastic refinement
// transitions.
//
// Each transition network maps an input z to a diagonal Gaussian:
//   h     = act_h(W_h u + b_h)        u = z, or [z; x] when amortized
//   m     = W_m h + b_m
//   g     = sigmoid(W_g h + b_g)
//   mu    = g * m + (1 - g) * z
//   sigma = softplus(W_s h + b_s) + kScaleFloor
// A TransitionLayer holds one forward network q_t(z_t | z_{t-1}) and one
// independent backward network r_t(z_{t-1} | z_t).

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "avo/dist.hpp"
#include "avo/nn.hpp"
#include "avo/tape.hpp"

namespace avo {

struct ChainConfig {
  std::size_t T = 10;
  std::size_t latent_dim = 2;
  std::size_t hidden = 32;
  bool amortized = false;
  std::size_t condition_dim = 0;
  bool learn_q0 = false;

  void validate() const;
  /// ReLU for energy fitting, ELU for amortized chains.
  Activation hidden_activation() const {
    return amortized ? Activation::Elu : Activation::Relu;
  }
};

enum class Direction { Forward, Backward };

/// Scratch buffers for the allocation-free double-precision path.
struct NetScratch {
  std::vector<double> u, h, m, g, s;
};

struct GatedNet {
  Dense hidden;
  Dense mean;
  Dense gate;
  Dense scale;
  Activation act = Activation::Relu;

  static GatedNet create(std::size_t latent, std::size_t condition,
                         std::size_t width, Activation act, Rng& rng);
  std::size_t latent_dim() const { return mean.out; }

  /// Writes mu and sigma for input z_in (and cond when amortized).
  void apply(std::span<const double> z_in, std::span<const double> cond,
             NetScratch& scratch, std::span<double> mu,
             std::span<double> sigma) const;
};

struct TransitionLayer {
  GatedNet forward;
  GatedNet backward;

  const GatedNet& net(Direction d) const {
    return d == Direction::Forward ? forward : backward;
  }
};

DiagGaussian transition_params(const TransitionLayer& layer, Direction dir,
                               std::span<const double> z_in,
                               std::span<const double> cond = {});

/// Amortized initial distribution x -> N(mu(x), sigma(x)).
struct GaussianEncoder {
  Dense hidden;
  Dense mean;
  Dense scale;
  Activation act = Activation::Elu;

  static GaussianEncoder create(std::size_t input, std::size_t latent,
                                std::size_t width, Rng& rng);
  DiagGaussian apply(std::span<const double> x) const;
};

class HierarchicalChain {
 public:
  /// Initialises weights ~ N(0, 1/fan_in) and biases 0, then shrinks the
  /// mean and scale output weights of each transition net by 10 and sets
  /// the scale bias to softplus^-1(0.1). The q0 encoder scale starts at 0.5.
  static HierarchicalChain create(const ChainConfig& config, Rng& rng);

  const ChainConfig& config() const { return config_; }
  std::vector<TransitionLayer>& layers() { return layers_; }
  const std::vector<TransitionLayer>& layers() const { return layers_; }
  std::optional<GaussianEncoder>& q0_net() { return q0_net_; }
  const std::optional<GaussianEncoder>& q0_net() const { return q0_net_; }

  /// Initial distribution: the encoder when learn_q0, else N(0, I).
  DiagGaussian initial(std::span<const double> cond = {}) const;

  /// Parameter order: q0 encoder (if any), then for each layer the forward
  /// and backward networks as hidden, mean, gate, scale.
  ParamSet params();

 private:
  ChainConfig config_;
  std::vector<TransitionLayer> layers_;
  std::optional<GaussianEncoder> q0_net_;
};

// ---------------------------------------------------------------------------
// Tape-side views

struct BoundGatedNet {
  BoundDense hidden, mean, gate, scale;
  Activation act = Activation::Relu;

  GaussianVar apply(Var z_in, std::optional<Var> cond) const;
};

struct BoundLayer {
  BoundGatedNet forward;
  BoundGatedNet backward;
};

struct BoundEncoder {
  BoundDense hidden, mean, scale;
  Activation act = Activation::Elu;

  GaussianVar apply(Var x) const;
};

/// A HierarchicalChain whose parameters are leaves (or constants) on a tape.
class BoundChain {
 public:
  BoundChain(Tape& tape, HierarchicalChain& chain, bool trainable);

  const ChainConfig& config() const { return config_; }
  const std::vector<BoundLayer>& layers() const { return layers_; }
  const std::optional<BoundEncoder>& q0_net() const { return q0_; }
  const TapeBinding& binding() const { return binding_; }
  Tape& tape() const { return *tape_; }

  /// Leaves of layer t (1-based), forward then backward, in gather order.
  std::vector<Var> layer_leaves(std::size_t t) const;

 private:
  Tape* tape_;
  ChainConfig config_;
  TapeBinding binding_;
  std::vector<BoundLayer> layers_;
  std::optional<BoundEncoder> q0_;
};

GaussianVar transition_params(const BoundLayer& layer, Direction dir,
                              Var z_in, std::optional<Var> cond = {});

// ---------------------------------------------------------------------------
// Traces

/// One sampled trajectory z_0..z_T with its per-layer log densities.
/// log_q_fwd[t-1] = log q_t(z_t | z_{t-1}), log_r_bwd[t-1] = log r_t(z_{t-1} | z_t).
struct ChainTrace {
  std::vector<std::vector<double>> z;
  double log_q0 = 0.0;
  std::vector<double> log_q_fwd;
  std::vector<double> log_r_bwd;
  std::vector<std::vector<double>> eps;
  std::vector<double> min_sigma;  // smallest sigma used by each layer
};

/// Tape-side trace. Each z holds `batch` rows of latent_dim values; the log
/// terms hold one value per row.
struct ChainTraceVars {
  std::vector<Var> z;
  std::vector<Var> z_in;  // input fed to layer t (detached in AVO mode)
  Var log_q0;
  std::vector<Var> log_q_fwd;
  std::vector<Var> log_r_bwd;
};

struct SampleOptions {
  /// Detach z_{t-1} before feeding it to layer t.
  bool detach_between_layers = false;
  /// Stop after this many layers (0 means all T).
  std::size_t layers = 0;
  /// Number of rows sampled at once. q0 must then hold batch rows and every
  /// log density in the trace is a vector of batch per-row values.
  std::size_t batch = 1;
};

/// Double-precision ancestral sample through every layer.
ChainTrace sample_chain(const HierarchicalChain& chain, const DiagGaussian& q0,
                        Rng& rng, std::span<const double> cond = {});

/// Reparameterized sample recorded on the chain's tape.
ChainTraceVars sample_chain(const BoundChain& chain, const GaussianVar& q0,
                            Rng& rng, std::optional<Var> cond = {},
                            const SampleOptions& options = {});

double log_q_joint(const ChainTrace& trace);
double log_r_joint(const ChainTrace& trace);
Var log_q_joint(const ChainTraceVars& trace);
Var log_r_joint(const ChainTraceVars& trace);

/// Reusable state for the evaluation-heavy double path.
class ChainSampler {
 public:
  explicit ChainSampler(const HierarchicalChain& chain);

  /// Forward sample; writes z_T into `z_final`.
  void forward(const DiagGaussian& q0, Rng& rng, std::span<const double> cond,
               std::span<double> z_final);

  /// Draws z_{T-1}..z_0 from the backward chain given z_T and returns
  /// log q(z_0..z_T) - log r(z_0..z_{T-1} | z_T).
  double backward_log_weight(const DiagGaussian& q0,
                             std::span<const double> z_final, Rng& rng,
                             std::span<const double> cond);

 private:
  const HierarchicalChain* chain_;
  NetScratch scratch_;
  std::vector<std::vector<double>> z_;
  std::vector<double> mu_, sigma_, eps_;
};

// ---------------------------------------------------------------------------
// Checkpoints

/// Text layout, one array per line after a two-line header:
///   avo-checkpoint 1
///   config T=<n> latent_dim=<n> hidden=<n> amortized=<0|1> condition_dim=<n> learn_q0=<0|1>
///   <name> <rows> <cols> v0 v1 ...
/// Names are "<block>.w" / "<block>.b" where block is e.g.
/// "layer3.forward.gate" or "q0.mean". Values use shortest round-trip decimal.
void save_checkpoint(HierarchicalChain& chain, std::ostream& os);
HierarchicalChain load_checkpoint(std::istream& is);

void write_params(const ParamSet& params, std::ostream& os);
void read_params(ParamSet& params, std::istream& is);

}  // namespace avo
