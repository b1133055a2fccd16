#include "avo/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <ostream>
#include <thread>

#include "avo/io.hpp"

namespace avo {

void adam_step(std::span<double> params, std::span<const double> grads,
               AdamState& s) {
  if (params.size() != grads.size() || params.size() != s.m.size() ||
      params.size() != s.v.size()) {
    throw DimensionError("adam_step: parameter, gradient and moment sizes differ");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    params[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
  }
}

void FitConfig::validate() const {
  if (mode == LossMode::Iwae) throw Error("fit-energy: mode must be elbo, avo or lc-avo");
  if (T < 1) throw Error("T must be >= 1");
  if (hidden < 1) throw Error("hidden must be >= 1");
  if (steps < 1) throw Error("steps must be >= 1");
  if (batch < 1) throw Error("batch must be >= 1");
  if (!(lr > 0.0 && std::isfinite(lr))) throw Error("lr must be positive");
  BetaProfile{beta0, rho}.validate();
  if (!(a >= 0.0 && a <= 1.0)) throw Error("a must lie in [0, 1]");
  if (checkpoint_every < 1) throw Error("checkpoint_every must be >= 1");
  if (checkpoint_n < 1 || checkpoint_k < 1) throw Error("checkpoint_n and checkpoint_k must be >= 1");
  if (final_n < 1 || final_k < 1) throw Error("final_n and final_k must be >= 1");
  if (!(mode_radius > 0.0)) throw Error("mode_radius must be positive");
}

namespace {

constexpr std::uint64_t kInitStream = 0;
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kFinalEvalStream = 2;
constexpr std::uint64_t kAisStream = 3;
constexpr std::uint64_t kCheckpointStream = 1000;

double elapsed_seconds(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

EvalReport evaluate_chain(const HierarchicalChain& chain,
                          const EnergySpec& target, const FitConfig& config,
                          Rng& rng) {
  EvalReport r;
  const DiagGaussian q0 = DiagGaussian::standard(chain.config().latent_dim);
  const auto est = negative_kl_estimate(chain, q0, target, config.final_n,
                                        config.final_k, rng,
                                        {config.eval_threads});
  r.negative_kl_shifted = est.mean;
  r.negative_kl_std_error = est.std_error;
  r.n_samples = config.final_n;
  r.k_inner = config.final_k;
  if (config.log_z) {
    r.log_z = *config.log_z;
  } else {
    r.log_z = ais_log_z(q0, target, config.ais, rng).log_z;
  }
  r.negative_kl = r.negative_kl_shifted - r.log_z;
  const auto centers = target.mode_centers();
  if (!centers.empty()) {
    const auto samples = sample_final(chain, config.final_n, rng);
    r.mode_fractions = mode_coverage(samples, centers, config.mode_radius);
  }
  return r;
}

std::vector<MetricPoint> report_metrics(const EvalReport& r, std::size_t step) {
  std::vector<MetricPoint> out{
      {step, "final_neg_kl_shifted", r.negative_kl_shifted},
      {step, "final_neg_kl_se", r.negative_kl_std_error},
      {step, "log_z", r.log_z},
      {step, "final_neg_kl", r.negative_kl},
  };
  for (std::size_t i = 0; i < r.mode_fractions.size(); ++i) {
    out.push_back({step, "mode_fraction_" + std::to_string(i + 1), r.mode_fractions[i]});
  }
  return out;
}

ExperimentResult fit_energy(const EnergySpec& target, const FitConfig& cfg) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::size_t d = target.dim();
  const Rng root(cfg.seed);
  Rng init_rng = root.split(kInitStream);
  Rng train_rng = root.split(kTrainStream);

  ChainConfig cc;
  cc.T = cfg.T;
  cc.latent_dim = d;
  cc.hidden = cfg.hidden;
  ExperimentResult result;
  result.seed = cfg.seed;
  result.chain = HierarchicalChain::create(cc, init_rng);
  HierarchicalChain& chain = result.chain;

  ParamSet params = chain.params();
  std::vector<double> flat = params.flatten();
  std::vector<double> grad(flat.size());
  AdamState adam(flat.size(), cfg.lr);
  const Schedule schedule = Schedule::linear(cfg.T, cfg.beta0, cfg.rho);
  const DiagGaussian q0_dist = DiagGaussian::standard(d);
  const EnergySpec f0 = EnergySpec::gaussian(q0_dist);
  const LogTargetFn log_f0 = log_target(f0);
  const LogTargetFn log_ft = log_target(target);

  // The log normaliser is needed for every checkpoint; compute it once.
  FitConfig eval_cfg = cfg;
  if (!eval_cfg.log_z) {
    Rng ais_rng = root.split(kAisStream);
    eval_cfg.log_z = ais_log_z(q0_dist, target, cfg.ais, ais_rng).log_z;
  }

  Tape tape;
  double objective_sum = 0.0;
  std::size_t objective_count = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double beta = schedule.beta.at(step, cfg.steps);
    LossMode mode = cfg.mode;
    if (mode == LossMode::LossCalibrated) mode = loss_calibrated_select(cfg.a, train_rng);

    tape.clear();
    BoundChain bc(tape, chain, true);
    const GaussianVar q0 = constant_gaussian(tape, q0_dist, cfg.batch);
    Var loss;
    try {
      SampleOptions opts;
      opts.detach_between_layers = mode == LossMode::Avo;
      opts.batch = cfg.batch;
      const ChainTraceVars tr = sample_chain(bc, q0, train_rng, {}, opts);
      const Var obj = mode == LossMode::Avo
                          ? avo_loss(tr, log_f0, log_ft, schedule.alphas, beta)
                          : elbo(tr, log_ft, beta);
      loss = -mean(obj);
    } catch (const Error& e) {
      throw DivergenceError(std::string("divergence at step ") +
                                std::to_string(step) + ": " + e.what(),
                            step);
    }
    const double objective = -loss.scalar();
    Gradients grads;
    try {
      grads = tape.backward(loss);
    } catch (const Error& e) {
      throw DivergenceError(std::string("divergence at step ") +
                                std::to_string(step) + ": " + e.what(),
                            step);
    }
    bc.binding().gather(grads, grad);
    adam_step(flat, grad, adam);
    for (double v : flat) {
      if (!std::isfinite(v)) {
        throw DivergenceError("non-finite parameter at step " + std::to_string(step), step);
      }
    }
    params.assign(flat);
    objective_sum += objective;
    ++objective_count;

    if ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps) {
      const std::size_t s = step + 1;
      Rng eval_rng = root.split(kCheckpointStream + s);
      const auto est = negative_kl_estimate(chain, q0_dist, target, cfg.checkpoint_n,
                                            cfg.checkpoint_k, eval_rng,
                                            {cfg.eval_threads});
      result.series.push_back({s, "objective", objective_sum / objective_count});
      result.series.push_back({s, "beta", beta});
      result.series.push_back({s, "neg_kl_shifted", est.mean});
      result.series.push_back({s, "neg_kl", est.mean - *eval_cfg.log_z});
      objective_sum = 0.0;
      objective_count = 0;
    }
  }

  Rng final_rng = root.split(kFinalEvalStream);
  result.final = evaluate_chain(chain, target, eval_cfg, final_rng);
  for (auto& m : report_metrics(result.final, cfg.steps)) result.series.push_back(m);
  result.wall_seconds = elapsed_seconds(start);
  return result;
}

// ---------------------------------------------------------------------------
// Sweep

void SweepConfig::validate() const {
  if (targets.empty()) throw Error("sweep: no targets");
  if (modes.empty()) throw Error("sweep: no modes");
  if (rhos.empty()) throw Error("sweep: no rho values");
  for (double r : rhos) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error("sweep: rho values must lie in [0, 1]");
  }
  if (trials < 1) throw Error("sweep: trials must be >= 1");
  for (const auto& t : targets) {
    if (EnergySpec::from_name(t).dim() != 2) throw Error("sweep: targets must be 2D");
  }
  fit.validate();
}

std::size_t sweep_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("AVO_THREADS")) {
    try {
      const long long n = parse_int(env);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const Error&) {
    }
    throw Error("AVO_THREADS must be a positive integer");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<SweepSummaryRow> summarize(const std::vector<SweepCell>& cells) {
  std::vector<SweepSummaryRow> rows;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SweepSummaryRow& r) {
      return r.target == c.target && r.mode == c.mode && r.rho == c.rho;
    });
    if (it == rows.end()) {
      rows.push_back({c.target, c.mode, c.rho, 0, 0.0, 0.0});
      it = rows.end() - 1;
    }
    if (c.ok) {
      ++it->n_ok;
      it->mean += c.final.negative_kl;
    }
  }
  for (auto& r : rows) {
    if (r.n_ok == 0) {
      r.mean = std::nan("");
      r.std = std::nan("");
      continue;
    }
    r.mean /= static_cast<double>(r.n_ok);
    double ss = 0.0;
    for (const auto& c : cells) {
      if (c.ok && c.target == r.target && c.mode == r.mode && c.rho == r.rho) {
        ss += (c.final.negative_kl - r.mean) * (c.final.negative_kl - r.mean);
      }
    }
    r.std = r.n_ok > 1 ? std::sqrt(ss / static_cast<double>(r.n_ok - 1)) : 0.0;
  }
  return rows;
}

SweepResult robustness_sweep(const SweepConfig& cfg,
                             const std::function<void(const SweepCell&)>& on_cell) {
  cfg.validate();
  SweepResult result;

  // One AIS normaliser per target, shared by all of its cells.
  for (std::size_t i = 0; i < cfg.targets.size(); ++i) {
    const EnergySpec spec = EnergySpec::from_name(cfg.targets[i]);
    Rng rng = Rng(cfg.seed_base).split(kAisStream + i);
    const double lz = cfg.fit.log_z
                          ? *cfg.fit.log_z
                          : ais_log_z(DiagGaussian::standard(spec.dim()), spec,
                                      cfg.fit.ais, rng)
                                .log_z;
    result.log_z.emplace_back(cfg.targets[i], lz);
  }

  for (const auto& t : cfg.targets) {
    for (LossMode m : cfg.modes) {
      for (double rho : cfg.rhos) {
        for (std::size_t k = 0; k < cfg.trials; ++k) {
          SweepCell c;
          c.target = t;
          c.mode = m;
          c.rho = rho;
          c.trial = k;
          c.seed = cfg.seed_base + result.cells.size();
          result.cells.push_back(std::move(c));
        }
      }
    }
  }

  const std::size_t threads = std::min(sweep_threads(cfg.threads), result.cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= result.cells.size()) return;
      SweepCell& c = result.cells[i];
      FitConfig fc = cfg.fit;
      fc.mode = c.mode;
      fc.rho = c.rho;
      fc.seed = c.seed;
      fc.eval_threads = 1;
      for (const auto& [name, lz] : result.log_z) {
        if (name == c.target) fc.log_z = lz;
      }
      try {
        ExperimentResult r = fit_energy(EnergySpec::from_name(c.target), fc);
        c.series = std::move(r.series);
        c.final = r.final;
        c.ok = true;
      } catch (const std::exception& e) {
        c.ok = false;
        c.error = e.what();
      }
      if (on_cell) {
        std::lock_guard<std::mutex> lock(report_mutex);
        on_cell(c);
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  result.summary = summarize(result.cells);
  return result;
}

void write_metrics_header(std::ostream& os) {
  os << "target,mode,rho,trial,step,metric,value\n";
}

void write_metrics_rows(std::ostream& os, const std::string& target,
                        const std::string& mode, double rho, std::size_t trial,
                        const std::vector<MetricPoint>& series) {
  const std::string prefix =
      target + ',' + mode + ',' + format_double(rho) + ',' + std::to_string(trial) + ',';
  for (const auto& m : series) {
    os << prefix << m.step << ',' << m.metric << ',' << format_double(m.value) << '\n';
  }
}

void write_summary_csv(std::ostream& os, const std::vector<SweepSummaryRow>& rows) {
  os << "target,mode,rho,n_ok,mean_neg_kl,std_neg_kl\n";
  for (const auto& r : rows) {
    os << r.target << ',' << loss_mode_name(r.mode) << ',' << format_double(r.rho)
       << ',' << r.n_ok << ',' << format_double(r.mean) << ',' << format_double(r.std)
       << '\n';
  }
}

}  // namespace avo
