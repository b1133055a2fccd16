#include "avo/nn.hpp"

#include <algorithm>
#include <cmath>

namespace avo {

double activate(Activation act, double x) {
  switch (act) {
    case Activation::Relu: return relu(x);
    case Activation::Elu: return elu(x);
    case Activation::Tanh: return std::tanh(x);
    case Activation::Softplus: return softplus(x);
  }
  return x;
}

Var activate(Activation act, Var x) {
  switch (act) {
    case Activation::Relu: return relu(x);
    case Activation::Elu: return elu(x);
    case Activation::Tanh: return tanh(x);
    case Activation::Softplus: return softplus(x);
  }
  return x;
}

const char* activation_name(Activation act) {
  switch (act) {
    case Activation::Relu: return "relu";
    case Activation::Elu: return "elu";
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
  }
  return "?";
}

void Dense::init(Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : w) v = s * rng.normal();
  std::fill(b.begin(), b.end(), 0.0);
}

void Dense::apply(std::span<const double> x, std::span<double> y) const {
  const double* row = w.data();
  for (std::size_t r = 0; r < out; ++r, row += in) {
    double s = b[r];
    for (std::size_t c = 0; c < in; ++c) s += row[c] * x[c];
    y[r] = s;
  }
}

void ParamSet::add(std::string name, Dense* dense) {
  entries_.push_back({std::move(name), dense});
}

std::size_t ParamSet::size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.dense->num_params();
  return n;
}

std::vector<double> ParamSet::flatten() const {
  std::vector<double> flat;
  flat.reserve(size());
  for (const auto& e : entries_) {
    flat.insert(flat.end(), e.dense->w.begin(), e.dense->w.end());
    flat.insert(flat.end(), e.dense->b.begin(), e.dense->b.end());
  }
  return flat;
}

void ParamSet::assign(std::span<const double> flat) {
  if (flat.size() != size()) throw DimensionError("ParamSet::assign: size mismatch");
  std::size_t k = 0;
  for (auto& e : entries_) {
    std::copy_n(flat.begin() + k, e.dense->w.size(), e.dense->w.begin());
    k += e.dense->w.size();
    std::copy_n(flat.begin() + k, e.dense->b.size(), e.dense->b.begin());
    k += e.dense->b.size();
  }
}

TapeBinding::TapeBinding(Tape& tape, const ParamSet& params, bool trainable) {
  bound_.reserve(params.entries().size());
  for (const auto& e : params.entries()) {
    if (trainable) {
      bound_.push_back({tape.variable(e.dense->w), tape.variable(e.dense->b)});
    } else {
      bound_.push_back({tape.constant(e.dense->w), tape.constant(e.dense->b)});
    }
  }
}

void TapeBinding::gather(const Gradients& grads, std::span<double> out) const {
  std::fill(out.begin(), out.end(), 0.0);
  accumulate(grads, out);
}

void TapeBinding::accumulate(const Gradients& grads,
                             std::span<double> out) const {
  std::size_t k = 0;
  for (const auto& bd : bound_) {
    for (const Var v : {bd.w, bd.b}) {
      auto g = grads.of(v);
      if (k + g.size() > out.size()) {
        throw DimensionError("TapeBinding::gather: output too small");
      }
      for (std::size_t i = 0; i < g.size(); ++i) out[k + i] += g[i];
      k += g.size();
    }
  }
  if (k != out.size()) throw DimensionError("TapeBinding::gather: size mismatch");
}

}  // namespace avo
