#include "avo/energy.hpp"

#include <cmath>

namespace avo {

namespace {

// Helpers that let one formula serve both doubles and tape Vars.
double sq(double x) { return x * x; }
Var sq(Var x) { return square(x); }
double lse(std::initializer_list<double> xs) {
  return log_sum_exp(std::span<const double>(xs.begin(), xs.size()));
}
// Elementwise over a batch column, so terms are folded pairwise.
Var lse(std::initializer_list<Var> xs) {
  auto it = xs.begin();
  Var acc = *it;
  for (++it; it != xs.end(); ++it) acc = log_add_exp(acc, *it);
  return acc;
}
double hypot2(double a, double b) { return std::sqrt(a * a + b * b); }
Var hypot2(Var a, Var b) { return hypot(a, b); }

std::vector<double> repeat_rows(std::span<const double> row, std::size_t n) {
  std::vector<double> out;
  out.reserve(row.size() * n);
  for (std::size_t i = 0; i < n; ++i) out.insert(out.end(), row.begin(), row.end());
  return out;
}

template <class S>
S half_sq(S x) {
  return -0.5 * sq(x);
}

template <class S>
S energy_a(S z1, S z2) {
  using std::exp;
  using std::log;
  const S r = hypot2(z1, z2);
  return half_sq((r - 2.0) / 0.4) +
         lse({half_sq((z1 - 2.0) / 0.6), half_sq((z1 + 2.0) / 0.6)});
}

template <class S>
S energy_b(S z1, S z2) {
  using std::sin;
  const S r = hypot2(0.5 * z1, 0.5 * z2);
  return half_sq((r - 2.0) / 0.5) +
         lse({half_sq((z1 - 2.0) / 0.6), half_sq(2.0 * sin(z1)),
              half_sq((z1 + z2 + 2.5) / 0.6)});
}

template <class S>
S energy_c(S z1, S z2) {
  const S r = hypot2(z1, z2 * std::sqrt(0.5));
  return -sq(2.0 - r);
}

constexpr double kModeWeights[4] = {0.1, 0.3, 0.4, 0.2};
constexpr double kModeCenters[4][2] = {{-2, 0}, {2, 0}, {0, 2}, {0, -2}};

template <class S>
S energy_d(S z1, S z2) {
  const double log_norm = -std::log(2.0 * M_PI * kFourModeVariance);
  auto comp = [&](int i) {
    return (sq(z1 - kModeCenters[i][0]) + sq(z2 - kModeCenters[i][1])) *
               (-0.5 / kFourModeVariance) +
           (std::log(kModeWeights[i]) + log_norm);
  };
  return lse({comp(0), comp(1), comp(2), comp(3)});
}

template <class S>
S w1_of(S z1) {
  using std::sin;
  return sin(z1 * (M_PI / 2.0));
}

template <class S>
S energy_e(S z1, S z2) {
  return half_sq((z2 - w1_of(z1)) / 0.4) - 0.1 * sq(z1);
}

template <class S>
S energy_f(S z1, S z2) {
  using std::exp;
  const S w1 = w1_of(z1);
  const S w2 = 3.0 * exp(half_sq(z1 - 2.0));
  return lse({half_sq((z2 - w1) / 0.35), half_sq((z2 - w1 + w2) / 0.35)}) -
         0.05 * sq(z1);
}

template <class S>
S toy_energy(EnergyKind kind, S z1, S z2) {
  switch (kind) {
    case EnergyKind::A: return energy_a(z1, z2);
    case EnergyKind::B: return energy_b(z1, z2);
    case EnergyKind::C: return energy_c(z1, z2);
    case EnergyKind::D: return energy_d(z1, z2);
    case EnergyKind::E: return energy_e(z1, z2);
    case EnergyKind::F: return energy_f(z1, z2);
    default: break;
  }
  throw Error("toy_energy: not a toy kind");
}

}  // namespace

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw Error("inverse_softplus: argument must be positive");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

// ---------------------------------------------------------------------------
// Noise model pieces

NoiseDecoder NoiseDecoder::init(std::size_t hidden_width, Rng& rng) {
  NoiseDecoder d;
  d.hidden = Dense(hidden_width, 1);
  d.out = Dense(2, hidden_width);
  d.hidden.init(rng);
  d.out.init(rng);
  for (double& b : d.out.b) b = inverse_softplus(0.3);
  return d;
}

NoiseDecoder NoiseDecoder::constant(double stddev, std::size_t hidden_width) {
  if (!(stddev > kScaleFloor)) {
    throw Error("NoiseDecoder::constant: stddev must exceed the floor");
  }
  NoiseDecoder d;
  d.hidden = Dense(hidden_width, 1);
  d.out = Dense(2, hidden_width);
  for (double& b : d.out.b) b = inverse_softplus(stddev - kScaleFloor);
  return d;
}

std::array<double, 2> NoiseDecoder::stddev(double z) const {
  std::vector<double> h(hidden.out);
  hidden.apply(std::span<const double>(&z, 1), h);
  for (double& v : h) v = activate(act, v);
  std::array<double, 2> s{};
  out.apply(h, s);
  for (double& v : s) v = softplus(v) + kScaleFloor;
  return s;
}

ParamSet NoiseDecoder::params() {
  ParamSet p;
  p.add("decoder.hidden", &hidden);
  p.add("decoder.out", &out);
  return p;
}

BoundNoiseDecoder BoundNoiseDecoder::from(const TapeBinding& binding,
                                          std::size_t first, Activation act) {
  return {binding[first], binding[first + 1], act};
}

BoundNoiseDecoder BoundNoiseDecoder::constant(Tape& tape,
                                              const NoiseDecoder& decoder) {
  return {{tape.constant(decoder.hidden.w), tape.constant(decoder.hidden.b)},
          {tape.constant(decoder.out.w), tape.constant(decoder.out.b)},
          decoder.act};
}

// z holds one latent per row; the result has two scales per row.
Var BoundNoiseDecoder::stddev(Var z) const {
  const Var h = activate(act, hidden.apply(z));
  return shift(softplus(out.apply(h)), kScaleFloor);
}

std::array<double, 2> noise_mean(double z) {
  const double a = M_PI * std::tanh(kNoiseEta * z);
  return {std::sin(a), std::cos(a)};
}

Var noise_mean(Var z) {
  const Var a = scale(tanh(scale(z, kNoiseEta)), M_PI);
  return row_concat(sin(a), cos(a), 1);
}

double noise_model_log_joint(const NoiseDecoder& theta,
                             std::span<const double> x, double z) {
  if (x.size() != 2) throw DimensionError("noise model data must be 2D");
  const auto mu = noise_mean(z);
  const auto s = theta.stddev(z);
  const double zero = 0.0, one = 1.0;
  return gaussian_log_prob(std::span<const double>(&zero, 1),
                           std::span<const double>(&one, 1),
                           std::span<const double>(&z, 1)) +
         gaussian_log_prob(mu, s, x);
}

Var noise_model_log_joint(const BoundNoiseDecoder& theta, Var x, Var z) {
  if (x.size() != 2 * z.size()) {
    throw DimensionError("noise model expects x in R^2 and z in R per row");
  }
  const Var prior = shift(scale(square(z), -0.5), -0.5 * kLogTwoPi);
  return prior + log_prob(GaussianVar{noise_mean(z), theta.stddev(z), 2}, x);
}

// ---------------------------------------------------------------------------
// EnergySpec

EnergySpec EnergySpec::toy(EnergyKind kind) {
  if (kind == EnergyKind::Gaussian || kind == EnergyKind::NoiseModelPosterior) {
    throw Error("EnergySpec::toy: kind is not a toy energy");
  }
  return EnergySpec(kind);
}

EnergySpec EnergySpec::gaussian(DiagGaussian g, double log_scale) {
  EnergySpec e(EnergyKind::Gaussian);
  e.gaussian_ = std::move(g);
  e.log_scale_ = log_scale;
  return e;
}

EnergySpec EnergySpec::noise_model_posterior(
    std::shared_ptr<const NoiseDecoder> decoder, std::array<double, 2> x) {
  if (!decoder) throw Error("noise_model_posterior: null decoder");
  EnergySpec e(EnergyKind::NoiseModelPosterior);
  e.decoder_ = std::move(decoder);
  e.x_ = x;
  return e;
}

EnergySpec EnergySpec::from_name(std::string_view name) {
  if (name == "a") return toy(EnergyKind::A);
  if (name == "b") return toy(EnergyKind::B);
  if (name == "c") return toy(EnergyKind::C);
  if (name == "d" || name == "four-mode") return toy(EnergyKind::D);
  if (name == "e") return toy(EnergyKind::E);
  if (name == "f") return toy(EnergyKind::F);
  if (name == "gaussian") return gaussian(DiagGaussian::standard(2));
  throw Error("unknown target '" + std::string(name) +
              "' (expected a, b, c, d, e, f, four-mode or gaussian)");
}

std::size_t EnergySpec::dim() const {
  switch (kind_) {
    case EnergyKind::Gaussian: return gaussian_->dim();
    case EnergyKind::NoiseModelPosterior: return 1;
    default: return 2;
  }
}

std::string EnergySpec::name() const {
  switch (kind_) {
    case EnergyKind::A: return "a";
    case EnergyKind::B: return "b";
    case EnergyKind::C: return "c";
    case EnergyKind::D: return "d";
    case EnergyKind::E: return "e";
    case EnergyKind::F: return "f";
    case EnergyKind::Gaussian: return "gaussian";
    case EnergyKind::NoiseModelPosterior: return "noise-posterior";
  }
  return "?";
}

void EnergySpec::check_dim(std::size_t n) const {
  if (n != dim()) {
    throw DimensionError("energy " + name() + ": expected dimension " +
                         std::to_string(dim()) + ", got " + std::to_string(n));
  }
}

double EnergySpec::log_density(std::span<const double> z) const {
  check_dim(z.size());
  switch (kind_) {
    case EnergyKind::Gaussian: return gaussian_->log_prob(z) + log_scale_;
    case EnergyKind::NoiseModelPosterior:
      return noise_model_log_joint(*decoder_, x_, z[0]);
    default: return toy_energy<double>(kind_, z[0], z[1]);
  }
}

Var EnergySpec::log_density(Var z) const {
  const std::size_t d = dim();
  if (z.size() == 0 || z.size() % d != 0) {
    throw DimensionError("energy " + name() + ": size " +
                         std::to_string(z.size()) +
                         " is not a multiple of dimension " + std::to_string(d));
  }
  const std::size_t rows = z.size() / d;
  Tape& tape = *z.tape();
  switch (kind_) {
    case EnergyKind::Gaussian: {
      const Var lp = log_prob(constant_gaussian(tape, *gaussian_, rows), z);
      return log_scale_ == 0.0 ? lp : shift(lp, log_scale_);
    }
    case EnergyKind::NoiseModelPosterior: {
      const auto bound = BoundNoiseDecoder::constant(tape, *decoder_);
      return noise_model_log_joint(bound, tape.constant(repeat_rows(x_, rows)), z);
    }
    default:
      return toy_energy<Var>(kind_, column(z, 0, 2), column(z, 1, 2));
  }
}

std::vector<std::vector<double>> EnergySpec::mode_centers() const {
  if (kind_ != EnergyKind::D) return {};
  std::vector<std::vector<double>> out;
  for (const auto& c : kModeCenters) out.push_back({c[0], c[1]});
  return out;
}

// ---------------------------------------------------------------------------
// AnnealedTarget

AnnealedTarget::AnnealedTarget(EnergySpec f0, EnergySpec f_final, double alpha)
    : f0_(std::move(f0)), ft_(std::move(f_final)), alpha_(alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw Error("AnnealedTarget: alpha must lie in [0, 1]");
  }
  if (f0_.dim() != ft_.dim()) {
    throw DimensionError("AnnealedTarget: endpoint dimensions differ");
  }
}

double AnnealedTarget::log_density(std::span<const double> z) const {
  if (alpha_ == 0.0) return f0_.log_density(z);
  if (alpha_ == 1.0) return ft_.log_density(z);
  return alpha_ * ft_.log_density(z) + (1.0 - alpha_) * f0_.log_density(z);
}

Var AnnealedTarget::log_density(Var z) const {
  if (alpha_ == 0.0) return f0_.log_density(z);
  if (alpha_ == 1.0) return ft_.log_density(z);
  return scale(ft_.log_density(z), alpha_) +
         scale(f0_.log_density(z), 1.0 - alpha_);
}

double interp_log_density(const AnnealedTarget& t, std::span<const double> z) {
  return t.log_density(z);
}

Var interp_log_density(const AnnealedTarget& t, Var z) {
  return t.log_density(z);
}

}  // namespace avo
