#include "avo/chain.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "avo/energy.hpp"
#include "avo/io.hpp"

namespace avo {

namespace {

// Encoder scale at initialisation.
constexpr double kInitialScale = 0.5;
// Transition networks start close to a gated identity with small noise: the
// scale head starts at this value and the mean and scale output weights are
// shrunk by kHeadGain.
constexpr double kTransitionInitialScale = 0.1;
constexpr double kHeadGain = 0.1;

void check_finite_values(std::span<const double> v, const char* what,
                         std::size_t layer) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw Error(std::string("non-finite ") + what + " at layer " +
                  std::to_string(layer));
    }
  }
}

template <class Fn>
auto at_layer(std::size_t layer, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " in layer " +
                           std::to_string(layer),
                       e.node());
  }
}

}  // namespace

void ChainConfig::validate() const {
  if (T < 1) throw Error("ChainConfig: T must be >= 1");
  if (latent_dim < 1) throw Error("ChainConfig: latent_dim must be >= 1");
  if (hidden < 1) throw Error("ChainConfig: hidden must be >= 1");
  if (amortized && condition_dim < 1) {
    throw Error("ChainConfig: amortized chains need condition_dim >= 1");
  }
  if (!amortized && condition_dim != 0) {
    throw Error("ChainConfig: condition_dim requires amortized mode");
  }
  if (learn_q0 && !amortized) {
    throw Error("ChainConfig: learn_q0 requires amortized mode");
  }
}

// ---------------------------------------------------------------------------
// GatedNet

GatedNet GatedNet::create(std::size_t latent, std::size_t condition,
                          std::size_t width, Activation act, Rng& rng) {
  GatedNet n;
  n.act = act;
  n.hidden = Dense(width, latent + condition);
  n.mean = Dense(latent, width);
  n.gate = Dense(latent, width);
  n.scale = Dense(latent, width);
  n.hidden.init(rng);
  n.mean.init(rng);
  n.gate.init(rng);
  n.scale.init(rng);
  for (double& w : n.mean.w) w *= kHeadGain;
  for (double& w : n.scale.w) w *= kHeadGain;
  for (double& b : n.scale.b) b = inverse_softplus(kTransitionInitialScale);
  return n;
}

void GatedNet::apply(std::span<const double> z_in, std::span<const double> cond,
                     NetScratch& s, std::span<double> mu,
                     std::span<double> sigma) const {
  const std::size_t d = latent_dim();
  if (z_in.size() != d || z_in.size() + cond.size() != hidden.in) {
    throw DimensionError("transition network: input dimension mismatch");
  }
  s.u.resize(hidden.in);
  s.h.resize(hidden.out);
  s.m.resize(d);
  s.g.resize(d);
  s.s.resize(d);
  std::copy(z_in.begin(), z_in.end(), s.u.begin());
  std::copy(cond.begin(), cond.end(), s.u.begin() + d);
  hidden.apply(s.u, s.h);
  for (double& v : s.h) v = activate(act, v);
  mean.apply(s.h, s.m);
  gate.apply(s.h, s.g);
  scale.apply(s.h, s.s);
  for (std::size_t i = 0; i < d; ++i) {
    const double g = sigmoid(s.g[i]);
    mu[i] = g * s.m[i] + (1.0 - g) * z_in[i];
    sigma[i] = softplus(s.s[i]) + kScaleFloor;
  }
}

DiagGaussian transition_params(const TransitionLayer& layer, Direction dir,
                               std::span<const double> z_in,
                               std::span<const double> cond) {
  const GatedNet& net = layer.net(dir);
  NetScratch scratch;
  std::vector<double> mu(net.latent_dim()), sigma(net.latent_dim());
  net.apply(z_in, cond, scratch, mu, sigma);
  return DiagGaussian(std::move(mu), std::move(sigma));
}

// ---------------------------------------------------------------------------
// GaussianEncoder

GaussianEncoder GaussianEncoder::create(std::size_t input, std::size_t latent,
                                        std::size_t width, Rng& rng) {
  GaussianEncoder e;
  e.hidden = Dense(width, input);
  e.mean = Dense(latent, width);
  e.scale = Dense(latent, width);
  e.hidden.init(rng);
  e.mean.init(rng);
  e.scale.init(rng);
  for (double& b : e.scale.b) b = inverse_softplus(kInitialScale);
  return e;
}

DiagGaussian GaussianEncoder::apply(std::span<const double> x) const {
  if (x.size() != hidden.in) throw DimensionError("encoder: input dimension mismatch");
  std::vector<double> h(hidden.out), mu(mean.out), s(scale.out);
  hidden.apply(x, h);
  for (double& v : h) v = activate(act, v);
  mean.apply(h, mu);
  scale.apply(h, s);
  for (double& v : s) v = softplus(v) + kScaleFloor;
  return DiagGaussian(std::move(mu), std::move(s));
}

// ---------------------------------------------------------------------------
// HierarchicalChain

HierarchicalChain HierarchicalChain::create(const ChainConfig& config,
                                            Rng& rng) {
  config.validate();
  HierarchicalChain c;
  c.config_ = config;
  if (config.learn_q0) {
    c.q0_net_ = GaussianEncoder::create(config.condition_dim, config.latent_dim,
                                        config.hidden, rng);
  }
  const Activation act = config.hidden_activation();
  for (std::size_t t = 0; t < config.T; ++t) {
    TransitionLayer layer;
    layer.forward = GatedNet::create(config.latent_dim, config.condition_dim,
                                     config.hidden, act, rng);
    layer.backward = GatedNet::create(config.latent_dim, config.condition_dim,
                                      config.hidden, act, rng);
    c.layers_.push_back(std::move(layer));
  }
  return c;
}

DiagGaussian HierarchicalChain::initial(std::span<const double> cond) const {
  if (q0_net_) return q0_net_->apply(cond);
  return DiagGaussian::standard(config_.latent_dim);
}

ParamSet HierarchicalChain::params() {
  ParamSet p;
  if (q0_net_) {
    p.add("q0.hidden", &q0_net_->hidden);
    p.add("q0.mean", &q0_net_->mean);
    p.add("q0.scale", &q0_net_->scale);
  }
  for (std::size_t t = 0; t < layers_.size(); ++t) {
    const std::string prefix = "layer" + std::to_string(t + 1) + ".";
    for (auto dir : {Direction::Forward, Direction::Backward}) {
      GatedNet& n =
          dir == Direction::Forward ? layers_[t].forward : layers_[t].backward;
      const std::string base =
          prefix + (dir == Direction::Forward ? "forward." : "backward.");
      p.add(base + "hidden", &n.hidden);
      p.add(base + "mean", &n.mean);
      p.add(base + "gate", &n.gate);
      p.add(base + "scale", &n.scale);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Tape side

GaussianVar BoundGatedNet::apply(Var z_in, std::optional<Var> cond) const {
  const std::size_t d = mean.b.size();
  const Var u = cond ? row_concat(z_in, *cond, d) : z_in;
  const Var h = activate(act, hidden.apply(u));
  const Var mu = gated_mix(gate.apply(h), mean.apply(h), z_in);
  const Var sigma = shift(softplus(scale.apply(h)), kScaleFloor);
  return {mu, sigma, d};
}

GaussianVar BoundEncoder::apply(Var x) const {
  const Var h = activate(act, hidden.apply(x));
  return {mean.apply(h), shift(softplus(scale.apply(h)), kScaleFloor),
          mean.b.size()};
}

GaussianVar transition_params(const BoundLayer& layer, Direction dir, Var z_in,
                              std::optional<Var> cond) {
  return (dir == Direction::Forward ? layer.forward : layer.backward)
      .apply(z_in, cond);
}

BoundChain::BoundChain(Tape& tape, HierarchicalChain& chain, bool trainable)
    : tape_(&tape),
      config_(chain.config()),
      binding_(tape, chain.params(), trainable) {
  std::size_t k = 0;
  if (chain.q0_net()) {
    q0_ = BoundEncoder{binding_[0], binding_[1], binding_[2],
                       chain.q0_net()->act};
    k = 3;
  }
  for (const auto& layer : chain.layers()) {
    BoundLayer bl;
    bl.forward = {binding_[k], binding_[k + 1], binding_[k + 2],
                  binding_[k + 3], layer.forward.act};
    bl.backward = {binding_[k + 4], binding_[k + 5], binding_[k + 6],
                   binding_[k + 7], layer.backward.act};
    k += 8;
    layers_.push_back(bl);
  }
}

std::vector<Var> BoundChain::layer_leaves(std::size_t t) const {
  if (t < 1 || t > layers_.size()) throw Error("layer index out of range");
  std::vector<Var> out;
  const auto& l = layers_[t - 1];
  for (const BoundGatedNet* n : {&l.forward, &l.backward}) {
    for (const BoundDense* d : {&n->hidden, &n->mean, &n->gate, &n->scale}) {
      out.push_back(d->w);
      out.push_back(d->b);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling

ChainTrace sample_chain(const HierarchicalChain& chain, const DiagGaussian& q0,
                        Rng& rng, std::span<const double> cond) {
  const auto& cfg = chain.config();
  if (q0.dim() != cfg.latent_dim) throw DimensionError("sample_chain: q0 dimension");
  if (cfg.amortized != !cond.empty()) {
    throw Error("sample_chain: cond must be given iff the chain is amortized");
  }
  const std::size_t d = cfg.latent_dim;
  ChainTrace tr;
  NetScratch scratch;
  tr.eps.push_back(rng.standard_normal(d));
  tr.z.push_back(q0.sample_reparam(tr.eps.back()));
  tr.log_q0 = q0.log_prob(tr.z.back());
  check_finite_values(tr.z.back(), "initial sample", 0);
  std::vector<double> mu(d), sigma(d);
  for (std::size_t t = 1; t <= chain.layers().size(); ++t) {
    const auto& layer = chain.layers()[t - 1];
    const auto& prev = tr.z[t - 1];
    layer.forward.apply(prev, cond, scratch, mu, sigma);
    tr.eps.push_back(rng.standard_normal(d));
    std::vector<double> z(d);
    for (std::size_t i = 0; i < d; ++i) z[i] = mu[i] + sigma[i] * tr.eps.back()[i];
    check_finite_values(z, "sample", t);
    tr.min_sigma.push_back(*std::min_element(sigma.begin(), sigma.end()));
    tr.log_q_fwd.push_back(gaussian_log_prob(mu, sigma, z));
    layer.backward.apply(z, cond, scratch, mu, sigma);
    tr.min_sigma.back() =
        std::min(tr.min_sigma.back(), *std::min_element(sigma.begin(), sigma.end()));
    tr.log_r_bwd.push_back(gaussian_log_prob(mu, sigma, prev));
    if (!std::isfinite(tr.log_q_fwd.back()) || !std::isfinite(tr.log_r_bwd.back())) {
      throw Error("non-finite log density at layer " + std::to_string(t));
    }
    tr.z.push_back(std::move(z));
  }
  return tr;
}

ChainTraceVars sample_chain(const BoundChain& chain, const GaussianVar& q0,
                            Rng& rng, std::optional<Var> cond,
                            const SampleOptions& options) {
  const auto& cfg = chain.config();
  if (cfg.amortized != cond.has_value()) {
    throw Error("sample_chain: cond must be given iff the chain is amortized");
  }
  const std::size_t layers =
      options.layers == 0 ? chain.layers().size() : options.layers;
  if (layers > chain.layers().size()) throw Error("sample_chain: too many layers");
  Tape& tape = chain.tape();
  const std::size_t d = cfg.latent_dim;
  const std::size_t batch = options.batch;
  if (batch == 0) throw DimensionError("sample_chain: empty batch");
  if (q0.mu.size() != batch * d) {
    throw DimensionError("sample_chain: q0 must hold " + std::to_string(batch) +
                         " rows of dimension " + std::to_string(d));
  }
  if (cond && cond->size() % batch != 0) {
    throw DimensionError("sample_chain: cond rows do not match the batch");
  }
  std::vector<double> eps(batch * d);

  ChainTraceVars tr;
  rng.fill_normal(eps);
  const Var z0 = at_layer(0, [&] { return sample_reparam(q0, tape.constant(eps)); });
  tr.z.push_back(z0);
  tr.log_q0 = at_layer(0, [&] { return log_prob(q0, z0); });
  for (std::size_t t = 1; t <= layers; ++t) {
    const auto& layer = chain.layers()[t - 1];
    at_layer(t, [&] {
      const Var prev = tr.z.back();
      const Var z_in = options.detach_between_layers ? tape.detach(prev) : prev;
      const GaussianVar q = layer.forward.apply(z_in, cond);
      rng.fill_normal(eps);
      const Var z = sample_reparam(q, tape.constant(eps));
      const GaussianVar r = layer.backward.apply(z, cond);
      tr.z_in.push_back(z_in);
      tr.log_q_fwd.push_back(log_prob(q, z));
      tr.log_r_bwd.push_back(log_prob(r, z_in));
      tr.z.push_back(z);
      return 0;
    });
  }
  return tr;
}

double log_q_joint(const ChainTrace& trace) {
  double s = trace.log_q0;
  for (double v : trace.log_q_fwd) s += v;
  return s;
}

double log_r_joint(const ChainTrace& trace) {
  if (trace.log_r_bwd.empty()) throw Error("log_r_joint: trace has no layers");
  double s = 0.0;
  for (double v : trace.log_r_bwd) s += v;
  return s;
}

Var log_q_joint(const ChainTraceVars& trace) {
  Var s = trace.log_q0;
  for (const Var& v : trace.log_q_fwd) s = s + v;
  return s;
}

Var log_r_joint(const ChainTraceVars& trace) {
  if (trace.log_r_bwd.empty()) throw Error("log_r_joint: trace has no layers");
  Var s = trace.log_r_bwd[0];
  for (std::size_t i = 1; i < trace.log_r_bwd.size(); ++i) {
    s = s + trace.log_r_bwd[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// ChainSampler

ChainSampler::ChainSampler(const HierarchicalChain& chain) : chain_(&chain) {
  const std::size_t d = chain.config().latent_dim;
  z_.assign(chain.layers().size() + 1, std::vector<double>(d));
  mu_.resize(d);
  sigma_.resize(d);
  eps_.resize(d);
}

void ChainSampler::forward(const DiagGaussian& q0, Rng& rng,
                           std::span<const double> cond,
                           std::span<double> z_final) {
  const std::size_t d = mu_.size();
  rng.fill_normal(eps_);
  for (std::size_t i = 0; i < d; ++i) z_[0][i] = q0.mu()[i] + q0.sigma()[i] * eps_[i];
  const auto& layers = chain_->layers();
  for (std::size_t t = 1; t <= layers.size(); ++t) {
    layers[t - 1].forward.apply(z_[t - 1], cond, scratch_, mu_, sigma_);
    rng.fill_normal(eps_);
    for (std::size_t i = 0; i < d; ++i) z_[t][i] = mu_[i] + sigma_[i] * eps_[i];
  }
  std::copy(z_.back().begin(), z_.back().end(), z_final.begin());
  check_finite_values(z_final, "forward sample", layers.size());
}

double ChainSampler::backward_log_weight(const DiagGaussian& q0,
                                         std::span<const double> z_final,
                                         Rng& rng,
                                         std::span<const double> cond) {
  const std::size_t d = mu_.size();
  const auto& layers = chain_->layers();
  const std::size_t T = layers.size();
  std::copy(z_final.begin(), z_final.end(), z_[T].begin());
  double log_r = 0.0;
  for (std::size_t t = T; t >= 1; --t) {
    layers[t - 1].backward.apply(z_[t], cond, scratch_, mu_, sigma_);
    rng.fill_normal(eps_);
    for (std::size_t i = 0; i < d; ++i) z_[t - 1][i] = mu_[i] + sigma_[i] * eps_[i];
    log_r += gaussian_log_prob(mu_, sigma_, z_[t - 1]);
  }
  double log_q = q0.log_prob(z_[0]);
  for (std::size_t t = 1; t <= T; ++t) {
    layers[t - 1].forward.apply(z_[t - 1], cond, scratch_, mu_, sigma_);
    log_q += gaussian_log_prob(mu_, sigma_, z_[t]);
  }
  return log_q - log_r;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_array(std::ostream& os, const std::string& name, std::size_t rows,
                 std::size_t cols, const std::vector<double>& values) {
  os << name << ' ' << rows << ' ' << cols;
  char buf[64];
  for (double v : values) {
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    os << ' ' << std::string_view(buf, res.ptr - buf);
  }
  os << '\n';
}

void read_array(std::istream& is, const std::string& name, std::size_t rows,
                std::size_t cols, std::vector<double>& values) {
  std::string line;
  if (!std::getline(is, line)) {
    throw Error("checkpoint: missing array " + name);
  }
  std::istringstream ls(line);
  std::string got;
  std::size_t r = 0, c = 0;
  ls >> got >> r >> c;
  if (got != name || r != rows || c != cols) {
    throw Error("checkpoint: expected " + name + " " + std::to_string(rows) +
                "x" + std::to_string(cols) + ", found " + got);
  }
  std::string tok;
  for (double& v : values) {
    if (!(ls >> tok)) throw Error("checkpoint: short array " + name);
    auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (res.ec != std::errc() || res.ptr != tok.data() + tok.size()) {
      throw Error("checkpoint: bad number '" + tok + "' in " + name);
    }
  }
  if (ls >> tok) throw Error("checkpoint: trailing values in " + name);
}

}  // namespace

void write_params(const ParamSet& params, std::ostream& os) {
  for (const auto& e : params.entries()) {
    write_array(os, e.name + ".w", e.dense->out, e.dense->in, e.dense->w);
    write_array(os, e.name + ".b", e.dense->out, 1, e.dense->b);
  }
}

void read_params(ParamSet& params, std::istream& is) {
  for (auto& e : params.entries()) {
    read_array(is, e.name + ".w", e.dense->out, e.dense->in, e.dense->w);
    read_array(is, e.name + ".b", e.dense->out, 1, e.dense->b);
  }
}

void save_checkpoint(HierarchicalChain& chain, std::ostream& os) {
  const auto& c = chain.config();
  os << "avo-checkpoint 1\n";
  os << "config T=" << c.T << " latent_dim=" << c.latent_dim
     << " hidden=" << c.hidden << " amortized=" << (c.amortized ? 1 : 0)
     << " condition_dim=" << c.condition_dim
     << " learn_q0=" << (c.learn_q0 ? 1 : 0) << '\n';
  write_params(chain.params(), os);
}

HierarchicalChain load_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "avo-checkpoint 1") {
    throw Error("checkpoint: unrecognised header");
  }
  if (!std::getline(is, line) || line.rfind("config ", 0) != 0) {
    throw Error("checkpoint: missing config line");
  }
  ChainConfig cfg;
  std::istringstream ls(line.substr(7));
  std::string kv;
  while (ls >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("checkpoint: bad config entry " + kv);
    const std::string key = kv.substr(0, eq);
    const long long parsed = parse_int(kv.substr(eq + 1));
    if (parsed < 0) throw Error("checkpoint: negative config value " + kv);
    const auto v = static_cast<std::size_t>(parsed);
    if (key == "T") cfg.T = v;
    else if (key == "latent_dim") cfg.latent_dim = v;
    else if (key == "hidden") cfg.hidden = v;
    else if (key == "amortized") cfg.amortized = v != 0;
    else if (key == "condition_dim") cfg.condition_dim = v;
    else if (key == "learn_q0") cfg.learn_q0 = v != 0;
    else throw Error("checkpoint: unknown config key " + key);
  }
  Rng rng(0);
  HierarchicalChain chain = HierarchicalChain::create(cfg, rng);
  ParamSet p = chain.params();
  read_params(p, is);
  return chain;
}

}  // namespace avo
