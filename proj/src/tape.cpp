#include "avo/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace avo {

namespace {

constexpr double kHalfLogTwoPi = 0.91893853320467274178032973640562;

std::string node_message(const char* what, Op op, std::uint32_t id) {
  std::ostringstream os;
  os << what << " at node " << id << " (" << op_name(op) << ")";
  return os.str();
}

bool is_unary(Op op) {
  return op >= Op::Neg && op <= Op::Shift;
}

bool is_binary_elementwise(Op op) {
  return op >= Op::Add && op <= Op::Hypot;
}

std::uint32_t as_u32(std::size_t n) {
  if (n > std::numeric_limits<std::uint32_t>::max()) {
    throw DimensionError("tape node too large");
  }
  return static_cast<std::uint32_t>(n);
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Detach: return "detach";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::LogAddExp: return "log_add_exp";
    case Op::Hypot: return "hypot";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Relu: return "relu";
    case Op::Elu: return "elu";
    case Op::Scale: return "scale";
    case Op::Shift: return "shift";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::LogSumExp: return "log_sum_exp";
    case Op::Norm2: return "norm2";
    case Op::Dot: return "dot";
    case Op::MatVec: return "matvec";
    case Op::Affine: return "affine";
    case Op::Broadcast: return "broadcast";
    case Op::Concat: return "concat";
    case Op::RowConcat: return "row_concat";
    case Op::Element: return "element";
    case Op::Column: return "column";
    case Op::GaussLogProb: return "gauss_log_prob";
    case Op::GatedMix: return "gated_mix";
  }
  return "?";
}

double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double elu(double x) { return x > 0.0 ? x : std::expm1(x); }

double relu(double x) { return x > 0.0 ? x : 0.0; }

double log_add_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

// ---------------------------------------------------------------------------
// Var / Gradients

std::span<const double> Var::value() const { return tape_->value(id_); }
double Var::scalar() const {
  auto v = value();
  if (v.size() != 1) throw DimensionError("Var::scalar on a non-scalar node");
  return v[0];
}
std::size_t Var::size() const { return tape_->value(id_).size(); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }
bool Var::detached() const { return tape_->detached(id_); }

std::span<const double> Gradients::of(Var v) const {
  return tape_->adjoint(v.id());
}
double Gradients::scalar(Var v) const {
  auto g = of(v);
  if (g.size() != 1) throw DimensionError("Gradients::scalar on a vector");
  return g[0];
}

// ---------------------------------------------------------------------------
// Tape bookkeeping

void Tape::clear() {
  nodes_.clear();
  values_.clear();
  adjoints_.clear();
}

void Tape::reserve(std::size_t nodes, std::size_t values) {
  nodes_.reserve(nodes);
  values_.reserve(values);
}

std::span<const double> Tape::value(std::uint32_t id) const {
  const Node& n = nodes_.at(id);
  return {values_.data() + n.offset, n.size};
}

std::span<const double> Tape::adjoint(std::uint32_t id) const {
  const Node& n = nodes_.at(id);
  if (static_cast<std::size_t>(n.offset) + n.size > adjoints_.size()) {
    throw Error("adjoint requested for a node recorded after backward()");
  }
  return {adjoints_.data() + n.offset, n.size};
}

std::array<std::uint32_t, 3> Tape::inputs(std::uint32_t id) const {
  const Node& n = nodes_.at(id);
  return {n.in[0], n.in[1], n.in[2]};
}

std::uint32_t Tape::checked(Var v) const {
  if (v.tape() != this) throw Error("Var belongs to a different tape");
  if (v.id() >= nodes_.size()) throw Error("Var id out of range");
  return v.id();
}

std::uint32_t Tape::push(Op op, std::uint32_t size, std::uint32_t a,
                         std::uint32_t b, std::uint32_t c, double param,
                         std::uint32_t aux) {
  Node n{};
  n.op = op;
  n.in[0] = a;
  n.in[1] = b;
  n.in[2] = c;
  n.offset = as_u32(values_.size());
  n.size = size;
  n.aux = aux;
  n.param = param;
  n.needs_grad = false;
  if (op != Op::Detach && op != Op::Constant) {
    for (std::uint32_t in : n.in) {
      if (in != kNoInput && nodes_[in].needs_grad) n.needs_grad = true;
    }
  }
  values_.resize(values_.size() + size);
  nodes_.push_back(n);
  return static_cast<std::uint32_t>(nodes_.size() - 1);
}

Var Tape::leaf(Op op, std::span<const double> values, bool needs_grad) {
  if (values.empty()) throw DimensionError("empty leaf");
  const auto id = push(op, as_u32(values.size()), kNoInput, kNoInput,
                       kNoInput, 0.0, 0);
  nodes_[id].needs_grad = needs_grad;
  std::copy(values.begin(), values.end(), values_.begin() + nodes_[id].offset);
  try {
    check_finite(id);
  } catch (...) {
    values_.resize(nodes_[id].offset);
    nodes_.pop_back();
    throw;
  }
  return {this, id};
}

Var Tape::variable(std::span<const double> values) {
  return leaf(Op::Leaf, values, true);
}
Var Tape::variable(double value) {
  return leaf(Op::Leaf, std::span<const double>(&value, 1), true);
}
Var Tape::constant(std::span<const double> values) {
  return leaf(Op::Constant, values, false);
}
Var Tape::constant(double value) {
  return leaf(Op::Constant, std::span<const double>(&value, 1), false);
}

Var Tape::detach(Var v) { return record(Op::Detach, {v}); }

void Tape::check_finite(std::uint32_t id) const {
  const Node& n = nodes_[id];
  const double* p = values_.data() + n.offset;
  for (std::uint32_t i = 0; i < n.size; ++i) {
    if (!std::isfinite(p[i])) {
      throw NumericError(node_message("non-finite forward value", n.op, id),
                         id);
    }
  }
}

// ---------------------------------------------------------------------------
// Recording: validate shapes, allocate, then evaluate.

Var Tape::record(Op op, std::span<const Var> inputs, double param,
                 std::uint32_t aux) {
  auto need = [&](std::size_t k) {
    if (inputs.size() != k) {
      throw DimensionError(std::string(op_name(op)) + " expects " +
                           std::to_string(k) + " inputs");
    }
  };
  auto fail = [&](const std::string& what) {
    throw DimensionError(std::string(op_name(op)) + ": " + what);
  };
  std::uint32_t in[3] = {kNoInput, kNoInput, kNoInput};
  std::uint32_t sz[3] = {0, 0, 0};
  for (std::size_t k = 0; k < inputs.size() && k < 3; ++k) {
    in[k] = checked(inputs[k]);
    sz[k] = nodes_[in[k]].size;
  }

  std::uint32_t out = 0;
  if (is_unary(op) || op == Op::Detach) {
    need(1);
    out = sz[0];
  } else if (is_binary_elementwise(op)) {
    need(2);
    if (sz[0] != sz[1] && sz[0] != 1 && sz[1] != 1) {
      fail("size mismatch " + std::to_string(sz[0]) + " vs " + std::to_string(sz[1]));
    }
    out = std::max(sz[0], sz[1]);
  } else {
    switch (op) {
      case Op::Sum:
      case Op::LogSumExp:
        need(1);
        if (aux == 0) aux = sz[0];
        if (sz[0] % aux != 0) fail("segment does not divide the input");
        out = sz[0] / aux;
        break;
      case Op::Mean:
      case Op::Norm2:
        need(1);
        out = 1;
        break;
      case Op::Dot:
        need(2);
        if (sz[0] != sz[1]) fail("size mismatch");
        out = 1;
        break;
      case Op::MatVec:
        need(2);
        if (sz[0] % sz[1] != 0) fail("matrix size not a multiple of vector size");
        aux = sz[1];
        out = sz[0] / sz[1];
        break;
      case Op::Affine: {
        need(3);
        const std::uint32_t rows = sz[2];
        if (sz[0] % rows != 0) fail("weight size not a multiple of bias size");
        const std::uint32_t cols = sz[0] / rows;
        if (sz[1] % cols != 0) {
          fail("input size " + std::to_string(sz[1]) +
               " not a multiple of " + std::to_string(cols));
        }
        aux = cols;
        out = sz[1] / cols * rows;
        break;
      }
      case Op::Broadcast:
        need(1);
        if (sz[0] != 1) fail("input must be a scalar");
        if (!(param >= 1.0)) fail("target size must be >= 1");
        out = static_cast<std::uint32_t>(param);
        break;
      case Op::Concat:
        need(2);
        out = sz[0] + sz[1];
        break;
      case Op::RowConcat: {
        need(2);
        if (aux == 0 || sz[0] % aux != 0) fail("bad row width");
        const std::uint32_t rows = sz[0] / aux;
        if (sz[1] % rows != 0) fail("row counts differ");
        out = sz[0] + sz[1];
        break;
      }
      case Op::Element:
        need(1);
        if (param < 0.0 || param >= sz[0]) fail("index out of range");
        out = 1;
        break;
      case Op::Column:
        need(1);
        if (aux == 0 || sz[0] % aux != 0) fail("bad row width");
        if (param < 0.0 || param >= aux) fail("column out of range");
        out = sz[0] / aux;
        break;
      case Op::GaussLogProb:
        need(3);
        if (sz[0] != sz[2] || sz[1] != sz[2]) fail("size mismatch");
        if (aux == 0) aux = sz[2];
        if (sz[2] % aux != 0) fail("row width does not divide the input");
        out = sz[2] / aux;
        break;
      case Op::GatedMix:
        need(3);
        if (sz[0] != sz[2] || sz[1] != sz[2]) fail("size mismatch");
        out = sz[2];
        break;
      default:
        throw Error(std::string("record: unsupported op ") + op_name(op));
    }
  }

  const std::uint32_t id = push(op, out, in[0], in[1], in[2], param, aux);
  try {
    forward_node(id);
    check_finite(id);
  } catch (...) {
    values_.resize(nodes_[id].offset);
    nodes_.pop_back();
    throw;
  }
  return {this, id};
}

void Tape::forward_node(std::uint32_t id) {
  const Node& n = nodes_[id];
  double* y = values_.data() + n.offset;
  auto val = [&](int k) { return values_.data() + nodes_[n.in[k]].offset; };
  auto size_of = [&](int k) { return nodes_[n.in[k]].size; };

  if (is_unary(n.op) || n.op == Op::Detach) {
    const double* x = val(0);
    for (std::uint32_t i = 0; i < n.size; ++i) {
      const double v = x[i];
      switch (n.op) {
        case Op::Detach: y[i] = v; break;
        case Op::Neg: y[i] = -v; break;
        case Op::Exp: y[i] = std::exp(v); break;
        case Op::Log:
          if (!(v > 0.0)) {
            throw NumericError(node_message("log of non-positive argument", n.op, id), id);
          }
          y[i] = std::log(v);
          break;
        case Op::Tanh: y[i] = std::tanh(v); break;
        case Op::Sin: y[i] = std::sin(v); break;
        case Op::Cos: y[i] = std::cos(v); break;
        case Op::Square: y[i] = v * v; break;
        case Op::Sqrt:
          if (!(v > 0.0)) {
            throw NumericError(node_message("sqrt of non-positive argument", n.op, id), id);
          }
          y[i] = std::sqrt(v);
          break;
        case Op::Sigmoid: y[i] = sigmoid(v); break;
        case Op::Softplus: y[i] = softplus(v); break;
        case Op::Relu: y[i] = relu(v); break;
        case Op::Elu: y[i] = elu(v); break;
        case Op::Scale: y[i] = n.param * v; break;
        case Op::Shift: y[i] = v + n.param; break;
        default: break;
      }
    }
    return;
  }
  if (is_binary_elementwise(n.op)) {
    const double* a = val(0);
    const double* b = val(1);
    const std::uint32_t sa = size_of(0) == 1 ? 0 : 1, sb = size_of(1) == 1 ? 0 : 1;
    for (std::uint32_t i = 0; i < n.size; ++i) {
      const double u = a[i * sa], v = b[i * sb];
      switch (n.op) {
        case Op::Add: y[i] = u + v; break;
        case Op::Sub: y[i] = u - v; break;
        case Op::Mul: y[i] = u * v; break;
        case Op::Div: y[i] = u / v; break;
        case Op::LogAddExp: y[i] = log_add_exp(u, v); break;
        case Op::Hypot: y[i] = std::sqrt(u * u + v * v); break;
        default: break;
      }
    }
    return;
  }
  switch (n.op) {
    case Op::Sum:
    case Op::LogSumExp: {
      const double* x = val(0);
      for (std::uint32_t s = 0; s < n.size; ++s) {
        std::span<const double> seg(x + static_cast<std::size_t>(s) * n.aux, n.aux);
        if (n.op == Op::LogSumExp) {
          y[s] = log_sum_exp(seg);
        } else {
          double acc = 0.0;
          for (double v : seg) acc += v;
          y[s] = acc;
        }
      }
      return;
    }
    case Op::Mean:
    case Op::Norm2: {
      const double* x = val(0);
      const std::uint32_t m = size_of(0);
      double acc = 0.0;
      for (std::uint32_t i = 0; i < m; ++i) acc += n.op == Op::Mean ? x[i] : x[i] * x[i];
      y[0] = n.op == Op::Mean ? acc / m : std::sqrt(acc);
      return;
    }
    case Op::Dot: {
      const double* a = val(0);
      const double* b = val(1);
      double acc = 0.0;
      for (std::uint32_t i = 0; i < size_of(0); ++i) acc += a[i] * b[i];
      y[0] = acc;
      return;
    }
    case Op::MatVec:
    case Op::Affine: {
      const double* w = val(0);
      const double* x = val(1);
      const double* b = n.op == Op::Affine ? val(2) : nullptr;
      const std::uint32_t cols = n.aux;
      const std::uint32_t rows = n.op == Op::Affine ? size_of(2) : n.size;
      const std::uint32_t batch = size_of(1) / cols;
      for (std::uint32_t s = 0; s < batch; ++s) {
        const double* xs = x + static_cast<std::size_t>(s) * cols;
        double* ys = y + static_cast<std::size_t>(s) * rows;
        for (std::uint32_t r = 0; r < rows; ++r) {
          const double* row = w + static_cast<std::size_t>(r) * cols;
          double acc = b ? b[r] : 0.0;
          for (std::uint32_t c = 0; c < cols; ++c) acc += row[c] * xs[c];
          ys[r] = acc;
        }
      }
      return;
    }
    case Op::Broadcast:
      std::fill_n(y, n.size, val(0)[0]);
      return;
    case Op::Concat:
      std::copy_n(val(0), size_of(0), y);
      std::copy_n(val(1), size_of(1), y + size_of(0));
      return;
    case Op::RowConcat: {
      const std::uint32_t wa = n.aux;
      const std::uint32_t rows = size_of(0) / wa;
      const std::uint32_t wb = size_of(1) / rows;
      const double* a = val(0);
      const double* b = val(1);
      for (std::uint32_t s = 0; s < rows; ++s) {
        double* ys = y + static_cast<std::size_t>(s) * (wa + wb);
        std::copy_n(a + static_cast<std::size_t>(s) * wa, wa, ys);
        std::copy_n(b + static_cast<std::size_t>(s) * wb, wb, ys + wa);
      }
      return;
    }
    case Op::Element:
      y[0] = val(0)[static_cast<std::uint32_t>(n.param)];
      return;
    case Op::Column: {
      const double* a = val(0);
      const auto j = static_cast<std::uint32_t>(n.param);
      for (std::uint32_t s = 0; s < n.size; ++s) y[s] = a[static_cast<std::size_t>(s) * n.aux + j];
      return;
    }
    case Op::GaussLogProb: {
      const double* mu = val(0);
      const double* sg = val(1);
      const double* z = val(2);
      for (std::uint32_t s = 0; s < n.size; ++s) {
        double acc = 0.0;
        for (std::uint32_t k = 0; k < n.aux; ++k) {
          const std::size_t i = static_cast<std::size_t>(s) * n.aux + k;
          if (!(sg[i] > 0.0)) {
            throw NumericError(node_message("non-positive scale", n.op, id), id);
          }
          const double r = (z[i] - mu[i]) / sg[i];
          acc -= std::log(sg[i]) + 0.5 * r * r + kHalfLogTwoPi;
        }
        y[s] = acc;
      }
      return;
    }
    case Op::GatedMix: {
      const double* a = val(0);
      const double* m = val(1);
      const double* z = val(2);
      for (std::uint32_t i = 0; i < n.size; ++i) {
        const double g = sigmoid(a[i]);
        y[i] = g * m[i] + (1.0 - g) * z[i];
      }
      return;
    }
    default:
      throw Error(std::string("forward: unsupported op ") + op_name(n.op));
  }
}

// ---------------------------------------------------------------------------
// Reverse sweep

Gradients Tape::backward(Var loss) {
  const std::uint32_t root = checked(loss);
  if (nodes_[root].size != 1) throw DimensionError("backward: loss must be scalar");
  adjoints_.assign(values_.size(), 0.0);
  adjoints_[nodes_[root].offset] = 1.0;
  for (std::uint32_t id = root + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.needs_grad) continue;
    const double* g = adjoints_.data() + n.offset;
    for (std::uint32_t i = 0; i < n.size; ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError(node_message("non-finite adjoint", n.op, id), id);
      }
    }
    backward_node(id);
  }
  return Gradients(this);
}

void Tape::backward_node(std::uint32_t id) {
  const Node& n = nodes_[id];
  const double* g = adjoints_.data() + n.offset;
  const double* y = values_.data() + n.offset;
  auto in_needs = [&](int k) {
    return n.in[k] != kNoInput && nodes_[n.in[k]].needs_grad;
  };
  auto val = [&](int k) { return values_.data() + nodes_[n.in[k]].offset; };
  auto adj = [&](int k) { return adjoints_.data() + nodes_[n.in[k]].offset; };
  auto size_of = [&](int k) { return nodes_[n.in[k]].size; };

  if (is_unary(n.op)) {
    if (!in_needs(0)) return;
    const double* x = val(0);
    double* ga = adj(0);
    for (std::uint32_t i = 0; i < n.size; ++i) {
      const double gi = g[i];
      switch (n.op) {
        case Op::Neg: ga[i] -= gi; break;
        case Op::Exp: ga[i] += gi * y[i]; break;
        case Op::Log: ga[i] += gi / x[i]; break;
        case Op::Tanh: ga[i] += gi * (1.0 - y[i] * y[i]); break;
        case Op::Sin: ga[i] += gi * std::cos(x[i]); break;
        case Op::Cos: ga[i] -= gi * std::sin(x[i]); break;
        case Op::Square: ga[i] += 2.0 * gi * x[i]; break;
        case Op::Sqrt: ga[i] += gi / (2.0 * y[i]); break;
        case Op::Sigmoid: ga[i] += gi * y[i] * (1.0 - y[i]); break;
        case Op::Softplus: ga[i] += gi * sigmoid(x[i]); break;
        case Op::Relu: ga[i] += x[i] > 0.0 ? gi : 0.0; break;
        case Op::Elu: ga[i] += x[i] > 0.0 ? gi : gi * (y[i] + 1.0); break;
        case Op::Scale: ga[i] += gi * n.param; break;
        case Op::Shift: ga[i] += gi; break;
        default: break;
      }
    }
    return;
  }
  if (is_binary_elementwise(n.op)) {
    const std::uint32_t sa = size_of(0) == 1 ? 0 : 1, sb = size_of(1) == 1 ? 0 : 1;
    const double* a = val(0);
    const double* b = val(1);
    const bool da = in_needs(0), db = in_needs(1);
    double* ga = da ? adj(0) : nullptr;
    double* gb = db ? adj(1) : nullptr;
    for (std::uint32_t i = 0; i < n.size; ++i) {
      const double gi = g[i], u = a[i * sa], v = b[i * sb];
      double du = 0.0, dv = 0.0;
      switch (n.op) {
        case Op::Add: du = gi; dv = gi; break;
        case Op::Sub: du = gi; dv = -gi; break;
        case Op::Mul: du = gi * v; dv = gi * u; break;
        case Op::Div: du = gi / v; dv = -gi * u / (v * v); break;
        case Op::LogAddExp:
          du = gi * std::exp(u - y[i]);
          dv = gi * std::exp(v - y[i]);
          break;
        case Op::Hypot:
          if (y[i] > 0.0) {
            du = gi * u / y[i];
            dv = gi * v / y[i];
          }
          break;
        default: break;
      }
      if (da) ga[i * sa] += du;
      if (db) gb[i * sb] += dv;
    }
    return;
  }
  switch (n.op) {
    case Op::Detach:
    case Op::Leaf:
    case Op::Constant:
      return;
    case Op::Sum:
    case Op::LogSumExp: {
      if (!in_needs(0)) return;
      const double* x = val(0);
      double* ga = adj(0);
      for (std::uint32_t s = 0; s < n.size; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * n.aux;
        for (std::uint32_t k = 0; k < n.aux; ++k) {
          ga[base + k] += n.op == Op::Sum ? g[s] : g[s] * std::exp(x[base + k] - y[s]);
        }
      }
      return;
    }
    case Op::Mean: {
      if (!in_needs(0)) return;
      const std::uint32_t m = size_of(0);
      double* ga = adj(0);
      for (std::uint32_t i = 0; i < m; ++i) ga[i] += g[0] / m;
      return;
    }
    case Op::Norm2: {
      if (!in_needs(0) || y[0] == 0.0) return;
      const double* x = val(0);
      double* ga = adj(0);
      for (std::uint32_t i = 0; i < size_of(0); ++i) ga[i] += g[0] * x[i] / y[0];
      return;
    }
    case Op::Dot: {
      const double* a = val(0);
      const double* b = val(1);
      if (in_needs(0)) {
        double* ga = adj(0);
        for (std::uint32_t i = 0; i < size_of(0); ++i) ga[i] += g[0] * b[i];
      }
      if (in_needs(1)) {
        double* gb = adj(1);
        for (std::uint32_t i = 0; i < size_of(0); ++i) gb[i] += g[0] * a[i];
      }
      return;
    }
    case Op::MatVec:
    case Op::Affine: {
      const std::uint32_t cols = n.aux;
      const std::uint32_t rows = n.op == Op::Affine ? size_of(2) : n.size;
      const std::uint32_t batch = size_of(1) / cols;
      const double* w = val(0);
      const double* x = val(1);
      double* gw = in_needs(0) ? adj(0) : nullptr;
      double* gx = in_needs(1) ? adj(1) : nullptr;
      double* gbias = n.op == Op::Affine && in_needs(2) ? adj(2) : nullptr;
      for (std::uint32_t s = 0; s < batch; ++s) {
        const double* xs = x + static_cast<std::size_t>(s) * cols;
        const double* gs = g + static_cast<std::size_t>(s) * rows;
        double* gxs = gx ? gx + static_cast<std::size_t>(s) * cols : nullptr;
        for (std::uint32_t r = 0; r < rows; ++r) {
          const double gr = gs[r];
          if (gr == 0.0) continue;
          if (gbias) gbias[r] += gr;
          if (gw) {
            double* row = gw + static_cast<std::size_t>(r) * cols;
            for (std::uint32_t c = 0; c < cols; ++c) row[c] += gr * xs[c];
          }
          if (gxs) {
            const double* row = w + static_cast<std::size_t>(r) * cols;
            for (std::uint32_t c = 0; c < cols; ++c) gxs[c] += gr * row[c];
          }
        }
      }
      return;
    }
    case Op::Broadcast: {
      if (!in_needs(0)) return;
      double acc = 0.0;
      for (std::uint32_t i = 0; i < n.size; ++i) acc += g[i];
      adj(0)[0] += acc;
      return;
    }
    case Op::Concat: {
      const std::uint32_t na = size_of(0), nb = size_of(1);
      if (in_needs(0)) {
        double* ga = adj(0);
        for (std::uint32_t i = 0; i < na; ++i) ga[i] += g[i];
      }
      if (in_needs(1)) {
        double* gb = adj(1);
        for (std::uint32_t i = 0; i < nb; ++i) gb[i] += g[na + i];
      }
      return;
    }
    case Op::RowConcat: {
      const std::uint32_t wa = n.aux;
      const std::uint32_t rows = size_of(0) / wa;
      const std::uint32_t wb = size_of(1) / rows;
      double* ga = in_needs(0) ? adj(0) : nullptr;
      double* gb = in_needs(1) ? adj(1) : nullptr;
      for (std::uint32_t s = 0; s < rows; ++s) {
        const double* gs = g + static_cast<std::size_t>(s) * (wa + wb);
        if (ga) {
          for (std::uint32_t k = 0; k < wa; ++k) ga[static_cast<std::size_t>(s) * wa + k] += gs[k];
        }
        if (gb) {
          for (std::uint32_t k = 0; k < wb; ++k) gb[static_cast<std::size_t>(s) * wb + k] += gs[wa + k];
        }
      }
      return;
    }
    case Op::Element:
      if (in_needs(0)) adj(0)[static_cast<std::uint32_t>(n.param)] += g[0];
      return;
    case Op::Column: {
      if (!in_needs(0)) return;
      double* ga = adj(0);
      const auto j = static_cast<std::uint32_t>(n.param);
      for (std::uint32_t s = 0; s < n.size; ++s) ga[static_cast<std::size_t>(s) * n.aux + j] += g[s];
      return;
    }
    case Op::GaussLogProb: {
      const double* mu = val(0);
      const double* sg = val(1);
      const double* z = val(2);
      double* gm = in_needs(0) ? adj(0) : nullptr;
      double* gs = in_needs(1) ? adj(1) : nullptr;
      double* gz = in_needs(2) ? adj(2) : nullptr;
      for (std::uint32_t s = 0; s < n.size; ++s) {
        for (std::uint32_t k = 0; k < n.aux; ++k) {
          const std::size_t i = static_cast<std::size_t>(s) * n.aux + k;
          const double r = (z[i] - mu[i]) / sg[i];
          const double d = g[s] * r / sg[i];
          if (gm) gm[i] += d;
          if (gs) gs[i] += g[s] * (r * r - 1.0) / sg[i];
          if (gz) gz[i] -= d;
        }
      }
      return;
    }
    case Op::GatedMix: {
      const double* a = val(0);
      const double* m = val(1);
      const double* z = val(2);
      double* ga = in_needs(0) ? adj(0) : nullptr;
      double* gm = in_needs(1) ? adj(1) : nullptr;
      double* gz = in_needs(2) ? adj(2) : nullptr;
      for (std::uint32_t i = 0; i < n.size; ++i) {
        const double s = sigmoid(a[i]);
        if (ga) ga[i] += g[i] * (m[i] - z[i]) * s * (1.0 - s);
        if (gm) gm[i] += g[i] * s;
        if (gz) gz[i] += g[i] * (1.0 - s);
      }
      return;
    }
    default:
      return;
  }
}

// ---------------------------------------------------------------------------
// Free functions

namespace {

Tape& tape_of(Var v) {
  if (!v.valid()) throw Error("operation on an unbound Var");
  return *v.tape();
}

Var unary(Op op, Var a, double param = 0.0, std::uint32_t aux = 0) {
  return tape_of(a).record(op, {a}, param, aux);
}

Var binary(Op op, Var a, Var b, std::uint32_t aux = 0) {
  return tape_of(a).record(op, {a, b}, 0.0, aux);
}

}  // namespace

Var add(Var a, Var b) { return binary(Op::Add, a, b); }
Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
Var div(Var a, Var b) { return binary(Op::Div, a, b); }
Var log_add_exp(Var a, Var b) { return binary(Op::LogAddExp, a, b); }
Var hypot(Var a, Var b) { return binary(Op::Hypot, a, b); }
Var neg(Var a) { return unary(Op::Neg, a); }
Var exp(Var a) { return unary(Op::Exp, a); }
Var log(Var a) { return unary(Op::Log, a); }
Var tanh(Var a) { return unary(Op::Tanh, a); }
Var sin(Var a) { return unary(Op::Sin, a); }
Var cos(Var a) { return unary(Op::Cos, a); }
Var square(Var a) { return unary(Op::Square, a); }
Var sqrt(Var a) { return unary(Op::Sqrt, a); }
Var sigmoid(Var a) { return unary(Op::Sigmoid, a); }
Var softplus(Var a) { return unary(Op::Softplus, a); }
Var relu(Var a) { return unary(Op::Relu, a); }
Var elu(Var a) { return unary(Op::Elu, a); }
Var scale(Var a, double c) { return unary(Op::Scale, a, c); }
Var shift(Var a, double c) { return unary(Op::Shift, a, c); }

Var sum(Var a, std::size_t segment) {
  return unary(Op::Sum, a, 0.0, as_u32(segment));
}
Var mean(Var a) { return unary(Op::Mean, a); }
Var log_sum_exp(Var a, std::size_t segment) {
  return unary(Op::LogSumExp, a, 0.0, as_u32(segment));
}
Var norm2(Var a) { return unary(Op::Norm2, a); }
Var dot(Var a, Var b) { return binary(Op::Dot, a, b); }

Var gauss_log_prob(Var mu, Var sigma, Var z, std::size_t width) {
  return tape_of(z).record(Op::GaussLogProb, {mu, sigma, z}, 0.0, as_u32(width));
}
Var gated_mix(Var a, Var m, Var z) {
  return tape_of(z).record(Op::GatedMix, {a, m, z});
}

Var matvec(Var w, Var x) { return binary(Op::MatVec, w, x); }
Var affine(Var w, Var x, Var b) {
  return tape_of(w).record(Op::Affine, {w, x, b});
}
Var broadcast(Var s, std::size_t n) {
  return unary(Op::Broadcast, s, static_cast<double>(n));
}
Var concat(Var a, Var b) { return binary(Op::Concat, a, b); }
Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat of nothing");
  Var out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat(out, parts[i]);
  return out;
}
Var row_concat(Var a, Var b, std::size_t width_a) {
  return binary(Op::RowConcat, a, b, as_u32(width_a));
}
Var element(Var a, std::size_t index) {
  return unary(Op::Element, a, static_cast<double>(index));
}
Var column(Var a, std::size_t j, std::size_t width) {
  return unary(Op::Column, a, static_cast<double>(j), as_u32(width));
}
Var operator/(double c, Var a) { return tape_of(a).constant(c) / a; }

}  // namespace avo
