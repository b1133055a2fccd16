#pragma once

// Dense layers and the plumbing that moves their parameters between plain
// storage, a tape, and a flat vector for the optimiser.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "avo/dist.hpp"
#include "avo/tape.hpp"

namespace avo {

/// Lower bound added to every softplus scale head.
inline constexpr double kScaleFloor = 1e-4;

enum class Activation { Relu, Elu, Tanh, Softplus };

double activate(Activation act, double x);
Var activate(Activation act, Var x);
const char* activation_name(Activation act);

/// y = W x + b with W stored row-major (out x in).
struct Dense {
  std::size_t out = 0;
  std::size_t in = 0;
  std::vector<double> w;
  std::vector<double> b;

  Dense() = default;
  Dense(std::size_t out_dim, std::size_t in_dim)
      : out(out_dim), in(in_dim), w(out_dim * in_dim, 0.0), b(out_dim, 0.0) {}

  /// Weights ~ N(0, 1/in), biases 0.
  void init(Rng& rng);
  void apply(std::span<const double> x, std::span<double> y) const;
  std::size_t num_params() const { return w.size() + b.size(); }
};

/// A Dense layer whose weights are tape leaves.
struct BoundDense {
  Var w;
  Var b;

  Var apply(Var x) const { return affine(w, x, b); }
};

/// Ordered collection of dense layers belonging to one model. The order is
/// the order of the flat parameter vector and of the checkpoint file.
class ParamSet {
 public:
  void add(std::string name, Dense* dense);

  std::size_t size() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);

  struct Entry {
    std::string name;
    Dense* dense;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

/// Binds a ParamSet to a tape and gathers gradients back in flat order.
class TapeBinding {
 public:
  TapeBinding(Tape& tape, const ParamSet& params, bool trainable);

  const BoundDense& operator[](std::size_t i) const { return bound_[i]; }
  std::size_t size() const { return bound_.size(); }
  /// Appends adjoints in ParamSet order; `out` must have ParamSet::size().
  void gather(const Gradients& grads, std::span<double> out) const;
  void accumulate(const Gradients& grads, std::span<double> out) const;

 private:
  std::vector<BoundDense> bound_;
};

}  // namespace avo
