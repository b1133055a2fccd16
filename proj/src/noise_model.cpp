#include "avo/noise_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace avo {

namespace {

constexpr std::uint64_t kInitStream = 0;
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kEvalStream = 2;
constexpr std::uint64_t kDataStream = 4;
constexpr std::uint64_t kReferenceStream = 5;

// One trainable block: a ParamSet, its flat copy and its Adam state.
struct Trainable {
  ParamSet params;
  std::vector<double> flat;
  std::vector<double> grad;
  AdamState adam;

  Trainable(ParamSet p, double lr)
      : params(std::move(p)),
        flat(params.flatten()),
        grad(flat.size()),
        adam(flat.size(), lr) {}

  void step(const TapeBinding& binding, const Gradients& grads,
            std::size_t step_index) {
    binding.gather(grads, grad);
    adam_step(flat, grad, adam);
    for (double v : flat) {
      if (!std::isfinite(v)) {
        throw DivergenceError("non-finite parameter at step " + std::to_string(step_index),
                              step_index);
      }
    }
    params.assign(flat);
  }
};

ParamSet encoder_params(GaussianEncoder& e) {
  ParamSet p;
  p.add("encoder.hidden", &e.hidden);
  p.add("encoder.mean", &e.mean);
  p.add("encoder.scale", &e.scale);
  return p;
}

double standard_normal_log_prob(double z) { return -0.5 * (z * z + kLogTwoPi); }

}  // namespace

const char* noise_variant_name(NoiseVariant v) {
  switch (v) {
    case NoiseVariant::Iwae: return "iwae";
    case NoiseVariant::Vae: return "vae";
    case NoiseVariant::Avo: return "avo";
  }
  return "?";
}

NoiseVariant parse_noise_variant(std::string_view name) {
  if (name == "iwae") return NoiseVariant::Iwae;
  if (name == "vae") return NoiseVariant::Vae;
  if (name == "avo") return NoiseVariant::Avo;
  throw Error("unknown variant '" + std::string(name) + "' (expected iwae, vae or avo)");
}

void NoiseModelConfig::validate() const {
  if (n_data < 1) throw Error("n_data must be >= 1");
  if (steps < 1) throw Error("steps must be >= 1");
  if (batch < 1) throw Error("batch must be >= 1");
  if (!(lr > 0.0 && std::isfinite(lr))) throw Error("lr must be positive");
  if (!(noise_std > 0.0 && std::isfinite(noise_std))) throw Error("noise_std must be positive");
  if (decoder_hidden < 1 || encoder_hidden < 1 || chain_hidden < 1) {
    throw Error("hidden widths must be >= 1");
  }
  if (T < 1) throw Error("T must be >= 1");
  if (!(a >= 0.0 && a <= 1.0)) throw Error("a must lie in [0, 1]");
  if (iwae_samples < 1) throw Error("iwae_samples must be >= 1");
  if (checkpoint_every < 1) throw Error("checkpoint_every must be >= 1");
  if (eval_samples < 1 || reference_samples < 1) throw Error("sample counts must be >= 1");
  if (grid_n < 2) throw Error("grid_n must be >= 2");
  grid_bounds.validate();
  if (!(z_lo < z_hi) || z_nodes < 2) throw Error("bad latent quadrature");
}

double NoiseModelResult::metric(std::string_view name) const {
  for (const auto& m : final) {
    if (m.metric == name) return m.value;
  }
  throw Error("no metric named '" + std::string(name) + "'");
}

std::vector<std::array<double, 2>> generate_noise_data(std::size_t n,
                                                       double noise_std,
                                                       Rng& rng) {
  std::vector<std::array<double, 2>> out(n);
  for (auto& x : out) {
    const auto m = noise_mean(rng.normal());
    x[0] = m[0] + noise_std * rng.normal();
    x[1] = m[1] + noise_std * rng.normal();
  }
  return out;
}

Grid2D learned_density_grid(const NoiseDecoder& decoder, Bounds2D bounds,
                            std::size_t nx, std::size_t ny, double z_lo,
                            double z_hi, std::size_t z_nodes) {
  Grid2D g(bounds, nx, ny);
  Grid1D quad{z_lo, z_hi, std::vector<double>(z_nodes)};
  std::vector<std::array<double, 2>> mean(z_nodes), sd(z_nodes);
  std::vector<double> log_prior(z_nodes);
  for (std::size_t i = 0; i < z_nodes; ++i) {
    const double z = quad.node(i);
    mean[i] = noise_mean(z);
    sd[i] = decoder.stddev(z);
    log_prior[i] = standard_normal_log_prob(z);
  }
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const std::array<double, 2> x{g.x_center(ix), g.y_center(iy)};
      for (std::size_t i = 0; i < z_nodes; ++i) {
        quad.values[i] = std::exp(log_prior[i] + gaussian_log_prob(mean[i], sd[i], x));
      }
      g.at(ix, iy) = quad.trapezoid();
    }
  }
  return g;
}

std::vector<double> sample_posterior(const NoiseModelParams& params,
                                     std::array<double, 2> x, std::size_t n,
                                     Rng& rng) {
  std::vector<double> out(n);
  switch (params.variant) {
    case NoiseVariant::Iwae:
      for (double& z : out) z = rng.normal();
      break;
    case NoiseVariant::Vae: {
      const DiagGaussian q = params.encoder->apply(x);
      for (double& z : out) z = q.sample(rng)[0];
      break;
    }
    case NoiseVariant::Avo: {
      const auto draws = sample_final(*params.chain, n, rng, x);
      for (std::size_t i = 0; i < n; ++i) out[i] = draws[i][0];
      break;
    }
  }
  return out;
}

Grid1D histogram_1d(std::span<const double> draws, double lo, double hi,
                    std::size_t nodes) {
  if (nodes < 2 || !(lo < hi)) throw Error("histogram_1d: bad grid");
  if (draws.empty()) throw Error("histogram_1d: no draws");
  Grid1D g{lo, hi, std::vector<double>(nodes, 0.0)};
  const double h = (hi - lo) / static_cast<double>(nodes - 1);
  for (double z : draws) {
    const double k = std::round((z - lo) / h);
    if (k < 0.0 || k > static_cast<double>(nodes - 1)) continue;
    g.values[static_cast<std::size_t>(k)] += 1.0;
  }
  for (double& v : g.values) v /= static_cast<double>(draws.size()) * h;
  return g;
}

NoiseModelResult fit_noise_model(const NoiseModelConfig& cfg) {
  cfg.validate();
  const Rng root(cfg.seed);
  Rng init_rng = root.split(kInitStream);
  Rng train_rng = root.split(kTrainStream);
  Rng data_rng = root.split(kDataStream);
  const auto data = generate_noise_data(cfg.n_data, cfg.noise_std, data_rng);

  NoiseModelResult result;
  NoiseModelParams& model = result.params;
  model.variant = cfg.variant;
  model.decoder = NoiseDecoder::init(cfg.decoder_hidden, init_rng);
  if (cfg.variant == NoiseVariant::Vae) {
    model.encoder = GaussianEncoder::create(2, 1, cfg.encoder_hidden, init_rng);
  } else if (cfg.variant == NoiseVariant::Avo) {
    ChainConfig cc;
    cc.T = cfg.T;
    cc.latent_dim = 1;
    cc.hidden = cfg.chain_hidden;
    cc.amortized = true;
    cc.condition_dim = 2;
    model.chain = HierarchicalChain::create(cc, init_rng);
  }

  Trainable dec(model.decoder.params(), cfg.lr);
  std::optional<Trainable> posterior;
  if (model.encoder) posterior.emplace(encoder_params(*model.encoder), cfg.lr);
  if (model.chain) posterior.emplace(model.chain->params(), cfg.lr);

  const Schedule schedule = Schedule::linear(cfg.T);
  const std::size_t B = cfg.batch;
  const std::size_t K = cfg.iwae_samples;
  std::vector<double> xb(2 * B), eps, lprior;
  Tape tape;
  double objective_sum = 0.0;
  std::size_t objective_count = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t b = 0; b < B; ++b) {
      const auto& x = data[train_rng.index(data.size())];
      xb[2 * b] = x[0];
      xb[2 * b + 1] = x[1];
    }
    tape.clear();
    TapeBinding dec_binding(tape, dec.params, true);
    const BoundNoiseDecoder theta =
        BoundNoiseDecoder::from(dec_binding, 0, model.decoder.act);
    std::optional<TapeBinding> enc_binding;
    std::optional<BoundChain> chain_binding;
    Var loss;
    try {
      switch (cfg.variant) {
        case NoiseVariant::Iwae: {
          // K prior draws per data point; the prior cancels in the weight.
          std::vector<double> xk(2 * B * K);
          eps.resize(B * K);
          lprior.resize(B * K);
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t k = 0; k < K; ++k) {
              const std::size_t r = b * K + k;
              xk[2 * r] = xb[2 * b];
              xk[2 * r + 1] = xb[2 * b + 1];
              eps[r] = train_rng.normal();
              lprior[r] = standard_normal_log_prob(eps[r]);
            }
          }
          const Var z = tape.constant(eps);
          const Var lw = noise_model_log_joint(theta, tape.constant(xk), z) -
                         tape.constant(lprior);
          loss = -mean(iwae_bound(lw, K));
          break;
        }
        case NoiseVariant::Vae: {
          enc_binding.emplace(tape, posterior->params, true);
          const BoundEncoder enc{(*enc_binding)[0], (*enc_binding)[1],
                                 (*enc_binding)[2], model.encoder->act};
          const Var x = tape.constant(xb);
          const GaussianVar q = enc.apply(x);
          eps.resize(B);
          train_rng.fill_normal(eps);
          const Var z = sample_reparam(q, tape.constant(eps));
          loss = -mean(noise_model_log_joint(theta, x, z) - log_prob(q, z));
          break;
        }
        case NoiseVariant::Avo: {
          chain_binding.emplace(tape, *model.chain, true);
          const Var x = tape.constant(xb);
          const GaussianVar q0 =
              constant_gaussian(tape, DiagGaussian::standard(1), B);
          const LossMode mode = loss_calibrated_select(cfg.a, train_rng);
          SampleOptions opts;
          opts.detach_between_layers = mode == LossMode::Avo;
          opts.batch = B;
          const ChainTraceVars tr = sample_chain(*chain_binding, q0, train_rng, x, opts);
          const LogTargetFn log_ft = [&](Var z) {
            return noise_model_log_joint(theta, x, z);
          };
          const LogTargetFn log_f0 = [](Var z) {
            return shift(scale(square(z), -0.5), -0.5 * kLogTwoPi);
          };
          const Var obj = mode == LossMode::Avo
                              ? avo_loss(tr, log_f0, log_ft, schedule.alphas, 1.0)
                              : elbo(tr, log_ft, 1.0);
          loss = -mean(obj);
          break;
        }
      }
    } catch (const DivergenceError&) {
      throw;
    } catch (const Error& e) {
      throw DivergenceError("divergence at step " + std::to_string(step) + ": " + e.what(),
                            step);
    }
    Gradients grads;
    try {
      grads = tape.backward(loss);
    } catch (const Error& e) {
      throw DivergenceError("divergence at step " + std::to_string(step) + ": " + e.what(),
                            step);
    }
    objective_sum -= loss.scalar();
    ++objective_count;
    dec.step(dec_binding, grads, step);
    if (enc_binding) posterior->step(*enc_binding, grads, step);
    if (chain_binding) posterior->step(chain_binding->binding(), grads, step);

    if ((step + 1) % cfg.checkpoint_every == 0 || step + 1 == cfg.steps) {
      result.series.push_back({step + 1, "objective", objective_sum / objective_count});
      objective_sum = 0.0;
      objective_count = 0;
    }
  }

  // Evaluation.
  Rng eval_rng = root.split(kEvalStream);
  Rng ref_rng = root.split(kReferenceStream);
  const auto reference = generate_noise_data(cfg.reference_samples, cfg.noise_std, ref_rng);
  result.data_histogram = histogram_grid(std::span<const std::array<double, 2>>(reference),
                                         cfg.grid_bounds, cfg.grid_n, cfg.grid_n);
  result.learned_density = learned_density_grid(model.decoder, cfg.grid_bounds, cfg.grid_n,
                                                cfg.grid_n, cfg.z_lo, cfg.z_hi, cfg.z_nodes);
  const NoiseDecoder truth = NoiseDecoder::constant(cfg.noise_std);
  result.true_posterior = true_posterior_grid(truth, kAmbiguousPoint, -4.0, 4.0, 401);
  result.model_posterior = true_posterior_grid(model.decoder, kAmbiguousPoint, -4.0, 4.0, 401);

  const auto draws = sample_posterior(model, kAmbiguousPoint, cfg.eval_samples, eval_rng);
  result.q_posterior = histogram_1d(draws, -4.0, 4.0, 81);
  double low = 0.0, high = 0.0, sum = 0.0;
  for (double z : draws) {
    low += z < -1.0 ? 1.0 : 0.0;
    high += z > 1.0 ? 1.0 : 0.0;
    sum += z;
  }
  const double n = static_cast<double>(draws.size());
  const std::size_t s = cfg.steps;
  result.final.push_back({s, "tv_to_data", total_variation(result.learned_density, result.data_histogram)});
  result.final.push_back({s, "q_tail_low", low / n});
  result.final.push_back({s, "q_tail_high", high / n});
  result.final.push_back({s, "q_mean", sum / n});
  if (model.encoder) {
    const DiagGaussian q = model.encoder->apply(kAmbiguousPoint);
    result.final.push_back({s, "encoder_mean", q.mu()[0]});
    result.final.push_back({s, "encoder_std", q.sigma()[0]});
  }
  return result;
}

}  // namespace avo
