#pragma once

// Training objectives over chain traces and the annealing schedules.
//
// All objectives are returned as quantities to maximise; the trainer negates
// them before descending. Tape-side objectives return one value per batch row.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "avo/chain.hpp"
#include "avo/dist.hpp"
#include "avo/energy.hpp"
#include "avo/tape.hpp"

namespace avo {

enum class LossMode { Elbo, Avo, LossCalibrated, Iwae };

const char* loss_mode_name(LossMode mode);
/// Accepts "elbo", "avo", "lc-avo" and "iwae".
LossMode parse_loss_mode(std::string_view name);

/// alpha_t = t / T for t = 0..T.
std::vector<double> linear_alphas(std::size_t T);

/// Linear beta warm-up: beta0 at step 0, reaching 1 after rho * total steps.
struct BetaProfile {
  double beta0 = 0.01;
  double rho = 0.0;

  void validate() const;
  double at(std::size_t step, std::size_t total_steps) const;
};

struct Schedule {
  std::vector<double> alphas;
  BetaProfile beta;

  static Schedule linear(std::size_t T, double beta0 = 0.01, double rho = 0.0);
  std::size_t T() const { return alphas.empty() ? 0 : alphas.size() - 1; }
  void validate() const;
};

struct ScheduleValues {
  std::vector<double> alphas;
  double beta = 1.0;
};

ScheduleValues schedule_values(const Schedule& schedule, std::size_t step,
                               std::size_t total_steps);

struct ObjectiveConfig {
  LossMode mode = LossMode::Avo;
  double a = 0.5;                  // AVO probability in loss-calibrated mode
  std::size_t iwae_samples = 500;  // K

  void validate() const;
};

/// Unnormalised log-target evaluated on a tape.
using LogTargetFn = std::function<Var(Var)>;

LogTargetFn log_target(const EnergySpec& spec);

/// log f(z_T) + beta * (log r_joint - log q_joint).
double elbo(const ChainTrace& trace, const EnergySpec& target, double beta);
Var elbo(const ChainTraceVars& trace, const LogTargetFn& log_f, double beta);
Var elbo(const ChainTraceVars& trace, const EnergySpec& target, double beta);

/// Sum over layers of
///   alpha_t log f_T(z_t) + (1 - alpha_t) log f_0(z_t)
///   + beta * (log r_t(z_{t-1} | z_t) - log q_t(z_t | z_{t-1})).
/// `trace` must come from a sample with detach_between_layers set; alphas
/// holds alpha_0..alpha_T.
Var avo_loss(const ChainTraceVars& trace, const LogTargetFn& log_f0,
             const LogTargetFn& log_ft, std::span<const double> alphas,
             double beta);

/// Loss for layer t alone: runs layers 1..t with detachment and returns
/// log f_t(z_t) + log r_t - log q_t.
Var avo_layer_loss(const BoundChain& chain, std::size_t t,
                   const GaussianVar& q0, const AnnealedTarget& target,
                   Rng& rng, std::optional<Var> cond = {});

/// One shared detached trace scored with avo_loss.
Var total_avo_step_loss(const BoundChain& chain, const GaussianVar& q0,
                        const EnergySpec& f0, const EnergySpec& target,
                        const Schedule& schedule, double beta, Rng& rng,
                        std::optional<Var> cond = {});

/// Avo with probability a, else Elbo.
LossMode loss_calibrated_select(double a, Rng& rng);

/// log (1/K) sum_k exp(log f(z_k) - log q(z_k)), z_k ~ q.
double iwae_bound(const DiagGaussian& proposal, const EnergySpec& target,
                  std::size_t K, Rng& rng);
/// log-mean-exp over consecutive groups of K log weights on a tape, one
/// bound per group (K = 0 treats the whole vector as one group).
Var iwae_bound(Var log_weights, std::size_t K = 0);

}  // namespace avo
