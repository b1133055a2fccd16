#pragma once

// Optimiser, energy fitting and the beta-annealing robustness sweep.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "avo/chain.hpp"
#include "avo/energy.hpp"
#include "avo/eval.hpp"
#include "avo/objective.hpp"

namespace avo {

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;

  AdamState() = default;
  AdamState(std::size_t n, double learning_rate)
      : lr(learning_rate), m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam descent step on `params`.
void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& state);

/// Non-finite loss or parameter during training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct MetricPoint {
  std::size_t step = 0;
  std::string metric;
  double value = 0.0;
};

struct FitConfig {
  LossMode mode = LossMode::Avo;  // Elbo, Avo or LossCalibrated
  std::size_t T = 10;
  std::size_t hidden = 32;
  std::size_t steps = 2000;
  std::size_t batch = 64;
  double lr = 1e-3;
  double beta0 = 0.01;
  double rho = 0.0;
  double a = 0.5;
  std::uint64_t seed = 0;

  std::size_t checkpoint_every = 200;
  std::size_t checkpoint_n = 200;
  std::size_t checkpoint_k = 20;
  std::size_t final_n = 10000;
  std::size_t final_k = 2000;
  double mode_radius = 0.6;
  std::size_t eval_threads = 1;

  /// Known log normaliser of the target; estimated with AIS when absent.
  std::optional<double> log_z;
  AisOptions ais;

  void validate() const;
};

struct ExperimentResult {
  std::vector<MetricPoint> series;
  EvalReport final;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  HierarchicalChain chain;
};

/// Trains a chain from N(0, I) towards `target`. Throws DivergenceError on a
/// non-finite loss, naming the step.
ExperimentResult fit_energy(const EnergySpec& target, const FitConfig& config);

/// Final evaluation of a trained chain (negative KL, log Z, mode coverage).
EvalReport evaluate_chain(const HierarchicalChain& chain,
                          const EnergySpec& target, const FitConfig& config,
                          Rng& rng);

struct SweepConfig {
  std::vector<std::string> targets{"a", "b", "c", "d", "e", "f"};
  std::vector<LossMode> modes{LossMode::Elbo, LossMode::Avo};
  std::vector<double> rhos{0.0, 0.2, 0.4, 0.6, 0.8};
  std::size_t trials = 10;
  std::uint64_t seed_base = 0;
  FitConfig fit;
  /// 0 means AVO_THREADS or the hardware concurrency.
  std::size_t threads = 0;

  void validate() const;
};

struct SweepCell {
  std::string target;
  LossMode mode = LossMode::Avo;
  double rho = 0.0;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<MetricPoint> series;
  EvalReport final;
};

struct SweepSummaryRow {
  std::string target;
  LossMode mode = LossMode::Avo;
  double rho = 0.0;
  std::size_t n_ok = 0;
  double mean = 0.0;  // of the unshifted final negative KL
  double std = 0.0;   // sample standard deviation over trials
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SweepSummaryRow> summary;
  std::vector<std::pair<std::string, double>> log_z;
};

/// Worker count: `requested` if non-zero, else AVO_THREADS, else hardware.
std::size_t sweep_threads(std::size_t requested);

/// Runs every (target, mode, rho, trial) cell with seed = seed_base + cell
/// index, cells ordered target-major then mode, rho, trial. A failed cell
/// is recorded and the sweep continues.
SweepResult robustness_sweep(
    const SweepConfig& config,
    const std::function<void(const SweepCell&)>& on_cell = {});

std::vector<SweepSummaryRow> summarize(const std::vector<SweepCell>& cells);

void write_metrics_header(std::ostream& os);
void write_metrics_rows(std::ostream& os, const std::string& target,
                        const std::string& mode, double rho, std::size_t trial,
                        const std::vector<MetricPoint>& series);
void write_summary_csv(std::ostream& os,
                       const std::vector<SweepSummaryRow>& rows);

/// Metric rows for a final report, tagged with `step`.
std::vector<MetricPoint> report_metrics(const EvalReport& report,
                                        std::size_t step);

}  // namespace avo
