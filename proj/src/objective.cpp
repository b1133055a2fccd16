#include "avo/objective.hpp"

#include <cmath>
#include <string>

namespace avo {

const char* loss_mode_name(LossMode mode) {
  switch (mode) {
    case LossMode::Elbo: return "elbo";
    case LossMode::Avo: return "avo";
    case LossMode::LossCalibrated: return "lc-avo";
    case LossMode::Iwae: return "iwae";
  }
  return "?";
}

LossMode parse_loss_mode(std::string_view name) {
  if (name == "elbo") return LossMode::Elbo;
  if (name == "avo") return LossMode::Avo;
  if (name == "lc-avo") return LossMode::LossCalibrated;
  if (name == "iwae") return LossMode::Iwae;
  throw Error("unknown mode '" + std::string(name) +
              "' (expected elbo, avo, lc-avo or iwae)");
}

std::vector<double> linear_alphas(std::size_t T) {
  if (T < 1) throw Error("linear_alphas: T must be >= 1");
  std::vector<double> a(T + 1);
  for (std::size_t t = 0; t <= T; ++t) {
    a[t] = static_cast<double>(t) / static_cast<double>(T);
  }
  a[T] = 1.0;
  return a;
}

void BetaProfile::validate() const {
  if (!(rho >= 0.0 && rho <= 1.0)) throw Error("rho must lie in [0, 1]");
  if (!(beta0 > 0.0 && beta0 <= 1.0)) throw Error("beta0 must lie in (0, 1]");
}

double BetaProfile::at(std::size_t step, std::size_t total_steps) const {
  if (rho == 0.0) return 1.0;
  const double ramp = rho * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s >= ramp) return 1.0;
  return std::min(1.0, beta0 + (1.0 - beta0) * s / ramp);
}

Schedule Schedule::linear(std::size_t T, double beta0, double rho) {
  Schedule s{linear_alphas(T), {beta0, rho}};
  s.validate();
  return s;
}

void Schedule::validate() const {
  if (alphas.size() < 2) throw Error("Schedule: need at least alpha_0 and alpha_1");
  if (alphas.front() != 0.0 || alphas.back() != 1.0) {
    throw Error("Schedule: alphas must start at 0 and end at 1");
  }
  for (std::size_t i = 1; i < alphas.size(); ++i) {
    if (!(alphas[i] > alphas[i - 1])) {
      throw Error("Schedule: alphas must be strictly increasing");
    }
  }
  beta.validate();
}

ScheduleValues schedule_values(const Schedule& schedule, std::size_t step,
                               std::size_t total_steps) {
  schedule.validate();
  if (step > total_steps) throw Error("schedule_values: step beyond total_steps");
  return {schedule.alphas, schedule.beta.at(step, total_steps)};
}

void ObjectiveConfig::validate() const {
  if (!(a >= 0.0 && a <= 1.0)) throw Error("calibration weight a must lie in [0, 1]");
  if (iwae_samples < 1) throw Error("iwae_samples must be >= 1");
}

LogTargetFn log_target(const EnergySpec& spec) {
  return [spec](Var z) { return spec.log_density(z); };
}

double elbo(const ChainTrace& trace, const EnergySpec& target, double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw Error("elbo: beta must lie in (0, 1]");
  const double lf = target.log_density(trace.z.back());
  if (!std::isfinite(lf)) throw Error("elbo: non-finite target value");
  return lf + beta * (log_r_joint(trace) - log_q_joint(trace));
}

Var elbo(const ChainTraceVars& trace, const LogTargetFn& log_f, double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw Error("elbo: beta must lie in (0, 1]");
  const Var lf = log_f(trace.z.back());
  const Var gap = log_r_joint(trace) - log_q_joint(trace);
  return beta == 1.0 ? lf + gap : lf + beta * gap;
}

Var elbo(const ChainTraceVars& trace, const EnergySpec& target, double beta) {
  return elbo(trace, log_target(target), beta);
}

namespace {

Var interpolated(const LogTargetFn& log_f0, const LogTargetFn& log_ft,
                 double alpha, Var z) {
  if (alpha == 1.0) return log_ft(z);
  if (alpha == 0.0) return log_f0(z);
  return alpha * log_ft(z) + (1.0 - alpha) * log_f0(z);
}

}  // namespace

Var avo_loss(const ChainTraceVars& trace, const LogTargetFn& log_f0,
             const LogTargetFn& log_ft, std::span<const double> alphas,
             double beta) {
  const std::size_t layers = trace.log_q_fwd.size();
  if (layers == 0) throw Error("avo_loss: trace has no layers");
  if (alphas.size() < layers + 1) throw Error("avo_loss: too few alphas");
  if (!(beta > 0.0 && beta <= 1.0)) throw Error("avo_loss: beta must lie in (0, 1]");
  Var total;
  for (std::size_t t = 1; t <= layers; ++t) {
    const Var gap = trace.log_r_bwd[t - 1] - trace.log_q_fwd[t - 1];
    const Var term = interpolated(log_f0, log_ft, alphas[t], trace.z[t]) +
                     (beta == 1.0 ? gap : beta * gap);
    total = t == 1 ? term : total + term;
  }
  return total;
}

Var avo_layer_loss(const BoundChain& chain, std::size_t t,
                   const GaussianVar& q0, const AnnealedTarget& target,
                   Rng& rng, std::optional<Var> cond) {
  if (t < 1 || t > chain.layers().size()) {
    throw Error("avo_layer_loss: layer index " + std::to_string(t) +
                " out of range");
  }
  SampleOptions opts;
  opts.detach_between_layers = true;
  opts.layers = t;
  opts.batch = q0.mu.size() / chain.config().latent_dim;
  const ChainTraceVars tr = sample_chain(chain, q0, rng, cond, opts);
  return target.log_density(tr.z[t]) + tr.log_r_bwd[t - 1] - tr.log_q_fwd[t - 1];
}

Var total_avo_step_loss(const BoundChain& chain, const GaussianVar& q0,
                        const EnergySpec& f0, const EnergySpec& target,
                        const Schedule& schedule, double beta, Rng& rng,
                        std::optional<Var> cond) {
  if (schedule.T() != chain.layers().size()) {
    throw Error("total_avo_step_loss: schedule and chain disagree on T");
  }
  SampleOptions opts;
  opts.detach_between_layers = true;
  opts.batch = q0.mu.size() / chain.config().latent_dim;
  const ChainTraceVars tr = sample_chain(chain, q0, rng, cond, opts);
  return avo_loss(tr, log_target(f0), log_target(target), schedule.alphas, beta);
}

LossMode loss_calibrated_select(double a, Rng& rng) {
  if (!(a >= 0.0 && a <= 1.0)) throw Error("loss_calibrated_select: a must lie in [0, 1]");
  return rng.uniform() < a ? LossMode::Avo : LossMode::Elbo;
}

double iwae_bound(const DiagGaussian& proposal, const EnergySpec& target,
                  std::size_t K, Rng& rng) {
  if (K < 1) throw Error("iwae_bound: K must be >= 1");
  std::vector<double> lw(K);
  for (std::size_t k = 0; k < K; ++k) {
    const auto z = proposal.sample(rng);
    lw[k] = target.log_density(z) - proposal.log_prob(z);
  }
  return log_sum_exp(lw) - std::log(static_cast<double>(K));
}

Var iwae_bound(Var log_weights, std::size_t K) {
  if (K == 0) K = log_weights.size();
  if (K < 1 || log_weights.size() % K != 0) {
    throw DimensionError("iwae_bound: weights do not split into groups of K");
  }
  return shift(log_sum_exp(log_weights, K), -std::log(static_cast<double>(K)));
}

}  // namespace avo
