#include "avo/dist.hpp"

#include <cmath>
#include <string>

namespace avo {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

double Rng::uniform() {
  return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw Error("Rng::index with n = 0");
  // Lemire-style rejection keeps the result unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % n);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

void Rng::fill_normal(std::span<double> out) {
  for (double& x : out) x = normal();
}

std::vector<double> Rng::standard_normal(std::size_t d) {
  std::vector<double> out(d);
  fill_normal(out);
  return out;
}

Rng Rng::split(std::uint64_t stream) const {
  return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x632be59bd9b4e019ULL)));
}

std::vector<double> draw_standard_normal(Rng& rng, std::size_t d) {
  if (d == 0) throw Error("draw_standard_normal: d must be >= 1");
  return rng.standard_normal(d);
}

double gaussian_log_prob(std::span<const double> mu,
                         std::span<const double> sigma,
                         std::span<const double> z) {
  double lp = 0.0;
  for (std::size_t d = 0; d < z.size(); ++d) {
    const double r = (z[d] - mu[d]) / sigma[d];
    lp += -std::log(sigma[d]) - 0.5 * kLogTwoPi - 0.5 * r * r;
  }
  return lp;
}

DiagGaussian::DiagGaussian(std::vector<double> mu, std::vector<double> sigma)
    : mu_(std::move(mu)), sigma_(std::move(sigma)) {
  if (mu_.size() != sigma_.size() || mu_.empty()) {
    throw DimensionError("DiagGaussian: mu and sigma must have equal, nonzero size");
  }
  for (std::size_t d = 0; d < sigma_.size(); ++d) {
    if (!(sigma_[d] > 0.0) || !std::isfinite(sigma_[d])) {
      throw Error("DiagGaussian: sigma[" + std::to_string(d) +
                  "] must be positive and finite");
    }
  }
}

DiagGaussian DiagGaussian::standard(std::size_t d) {
  return DiagGaussian(std::vector<double>(d, 0.0), std::vector<double>(d, 1.0));
}

double DiagGaussian::log_prob(std::span<const double> z) const {
  if (z.size() != mu_.size()) throw DimensionError("log_prob: dimension mismatch");
  return gaussian_log_prob(mu_, sigma_, z);
}

std::vector<double> DiagGaussian::sample_reparam(
    std::span<const double> eps) const {
  if (eps.size() != mu_.size()) {
    throw DimensionError("sample_reparam: dimension mismatch");
  }
  std::vector<double> z(mu_.size());
  for (std::size_t d = 0; d < z.size(); ++d) z[d] = mu_[d] + sigma_[d] * eps[d];
  return z;
}

std::vector<double> DiagGaussian::sample(Rng& rng) const {
  return sample_reparam(rng.standard_normal(dim()));
}

GaussianVar constant_gaussian(Tape& tape, const DiagGaussian& g,
                              std::size_t batch) {
  if (batch == 0) throw DimensionError("constant_gaussian: empty batch");
  if (batch == 1) return {tape.constant(g.mu()), tape.constant(g.sigma()), 0};
  std::vector<double> mu, sigma;
  mu.reserve(batch * g.dim());
  sigma.reserve(batch * g.dim());
  for (std::size_t b = 0; b < batch; ++b) {
    mu.insert(mu.end(), g.mu().begin(), g.mu().end());
    sigma.insert(sigma.end(), g.sigma().begin(), g.sigma().end());
  }
  return {tape.constant(mu), tape.constant(sigma), g.dim()};
}

Var log_prob(const GaussianVar& g, Var z) {
  if (g.mu.size() != z.size() || g.sigma.size() != z.size()) {
    throw DimensionError("log_prob: dimension mismatch");
  }
  return gauss_log_prob(g.mu, g.sigma, z, g.width);
}

Var sample_reparam(const GaussianVar& g, Var eps) {
  if (g.mu.size() != eps.size() || g.sigma.size() != eps.size()) {
    throw DimensionError("sample_reparam: dimension mismatch");
  }
  return g.mu + g.sigma * eps;
}

}  // namespace avo
