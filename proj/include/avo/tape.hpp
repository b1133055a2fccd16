#pragma once

// Reverse-mode automatic differentiation over small real vectors.
//
// A Tape records every operation eagerly: the forward value of a node is
// computed when the node is appended, and a single reverse sweep over the
// node list accumulates adjoints. Node ids are topologically ordered because
// a node can only reference nodes that already exist.
//
// Values live in one contiguous buffer owned by the tape, so a Var is only a
// (tape, id) handle. Clearing a tape keeps its capacity, which makes it cheap
// to rebuild the graph every optimisation step.
//
// Batches are stored row-major: B samples of width d form one node of size
// B * d. Affine maps, row concatenation, column extraction and the segmented
// reductions operate per row, so a whole minibatch costs one node per op.

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace avo {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite value or invalid argument detected at a specific tape node.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::uint32_t node)
      : Error(what), node_(node) {}
  std::uint32_t node() const { return node_; }

 private:
  std::uint32_t node_;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Detach,
  // binary elementwise
  Add,
  Sub,
  Mul,
  Div,
  LogAddExp,
  Hypot,
  // unary elementwise
  Neg,
  Exp,
  Log,
  Tanh,
  Sin,
  Cos,
  Square,
  Sqrt,
  Sigmoid,
  Softplus,
  Relu,
  Elu,
  Scale,
  Shift,
  // reductions
  Sum,
  Mean,
  LogSumExp,
  Norm2,
  Dot,
  // structure
  MatVec,
  Affine,
  Broadcast,
  Concat,
  RowConcat,
  Element,
  Column,
  // fused
  GaussLogProb,
  GatedMix,
};

const char* op_name(Op op);

class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the owning
/// tape is alive and has not been cleared.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  std::span<const double> value() const;
  double scalar() const;
  std::size_t size() const;
  bool requires_grad() const;
  bool detached() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Read-only view of the adjoints produced by Tape::backward. Invalidated by
/// the next backward() or clear() on the same tape.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const Tape* tape) : tape_(tape) {}

  std::span<const double> of(Var v) const;
  double scalar(Var v) const;

 private:
  const Tape* tape_ = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Trainable leaf.
  Var variable(std::span<const double> values);
  Var variable(double value);
  /// Non-trainable leaf; never receives an adjoint.
  Var constant(std::span<const double> values);
  Var constant(double value);

  /// Generic entry point. `param` carries the constant of Scale and Shift
  /// and the index of Element and Column. `aux` carries a row width or
  /// segment length for the batched ops (0 means the whole vector).
  Var record(Op op, std::span<const Var> inputs, double param = 0.0,
             std::uint32_t aux = 0);
  Var record(Op op, std::initializer_list<Var> inputs, double param = 0.0,
             std::uint32_t aux = 0) {
    return record(op, std::span<const Var>(inputs.begin(), inputs.size()),
                  param, aux);
  }

  /// Same forward value, no adjoint flows to the ancestors of `v`.
  Var detach(Var v);

  /// Reverse sweep from a scalar loss.
  Gradients backward(Var loss);

  void clear();
  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t nodes, std::size_t values);

  std::span<const double> value(std::uint32_t id) const;
  std::span<const double> adjoint(std::uint32_t id) const;
  bool requires_grad(std::uint32_t id) const {
    return nodes_[id].needs_grad;
  }
  bool detached(std::uint32_t id) const {
    return nodes_[id].op == Op::Detach;
  }
  Op op(std::uint32_t id) const { return nodes_[id].op; }
  /// Input ids of a node (kNoInput for unused slots).
  std::array<std::uint32_t, 3> inputs(std::uint32_t id) const;

  static constexpr std::uint32_t kNoInput = 0xffffffffu;

 private:
  struct Node {
    Op op;
    bool needs_grad;
    std::uint32_t in[3];
    std::uint32_t offset;
    std::uint32_t size;
    std::uint32_t aux;
    double param;
  };

  Var leaf(Op op, std::span<const double> values, bool needs_grad);
  std::uint32_t push(Op op, std::uint32_t size, std::uint32_t a,
                     std::uint32_t b, std::uint32_t c, double param,
                     std::uint32_t aux);
  void forward_node(std::uint32_t id);
  void check_finite(std::uint32_t id) const;
  void backward_node(std::uint32_t id);
  std::uint32_t checked(Var v) const;

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<double> adjoints_;
};

// Elementwise ops; binary ops broadcast a size-1 operand against a vector.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
/// log(exp(a) + exp(b)), stable.
Var log_add_exp(Var a, Var b);
/// sqrt(a^2 + b^2), with zero gradient at the origin.
Var hypot(Var a, Var b);
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sin(Var a);
Var cos(Var a);
Var square(Var a);
Var sqrt(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var relu(Var a);
Var elu(Var a);
Var scale(Var a, double c);
Var shift(Var a, double c);

// Reductions. `segment` splits the input into consecutive blocks of that
// length and reduces each one (0 reduces everything to a scalar).
Var sum(Var a, std::size_t segment = 0);
Var mean(Var a);
Var log_sum_exp(Var a, std::size_t segment = 0);
Var norm2(Var a);
Var dot(Var a, Var b);

/// Per-row diagonal Gaussian log density for rows of length `width`:
/// sum_i [-log s_i - log(2 pi)/2 - ((z_i - m_i) / s_i)^2 / 2].
/// width 0 treats the whole vector as one row.
Var gauss_log_prob(Var mu, Var sigma, Var z, std::size_t width = 0);
/// sigmoid(a) * m + (1 - sigmoid(a)) * z, elementwise.
Var gated_mix(Var a, Var m, Var z);

/// W (rows x cols, row-major) times x (cols). rows = |W| / |x|.
Var matvec(Var w, Var x);
/// W x_s + b for every row x_s of x, where cols = |W| / |b|.
Var affine(Var w, Var x, Var b);
/// Repeat a scalar n times.
Var broadcast(Var scalar, std::size_t n);
Var concat(Var a, Var b);
Var concat(std::span<const Var> parts);
/// Row-wise concatenation [a_s, b_s]; `width_a` is the row length of a.
Var row_concat(Var a, Var b, std::size_t width_a);
Var element(Var a, std::size_t index);
/// Entry j of every row of length `width`.
Var column(Var a, std::size_t j, std::size_t width);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator+(Var a, double c) { return shift(a, c); }
inline Var operator+(double c, Var a) { return shift(a, c); }
inline Var operator-(Var a, double c) { return shift(a, -c); }
inline Var operator-(double c, Var a) { return shift(neg(a), c); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator/(Var a, double c) { return scale(a, 1.0 / c); }
Var operator/(double c, Var a);

// Scalar helpers shared by code that is generic over double and Var.
double softplus(double x);
double sigmoid(double x);
double elu(double x);
double relu(double x);
double log_add_exp(double a, double b);
double log_sum_exp(std::span<const double> xs);

}  // namespace avo
