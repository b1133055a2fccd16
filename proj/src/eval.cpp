#include "avo/eval.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>

#include "avo/io.hpp"

namespace avo {

// ---------------------------------------------------------------------------
// Grids

void Bounds2D::validate() const {
  if (!(std::isfinite(xmin) && std::isfinite(xmax) && std::isfinite(ymin) &&
        std::isfinite(ymax) && xmin < xmax && ymin < ymax)) {
    throw Error("degenerate grid bounds");
  }
}

Grid2D::Grid2D(Bounds2D b, std::size_t nx_, std::size_t ny_)
    : bounds(b), nx(nx_), ny(ny_) {
  b.validate();
  if (nx < 2 || ny < 2) throw Error("grid resolution must be at least 2x2");
  values.assign(nx * ny, 0.0);
}

double Grid2D::x_center(std::size_t ix) const {
  return bounds.xmin + (ix + 0.5) * (bounds.xmax - bounds.xmin) / nx;
}

double Grid2D::y_center(std::size_t iy) const {
  return bounds.ymin + (iy + 0.5) * (bounds.ymax - bounds.ymin) / ny;
}

bool Grid2D::locate(double x, double y, std::size_t& ix, std::size_t& iy) const {
  if (!(x >= bounds.xmin && x < bounds.xmax && y >= bounds.ymin &&
        y < bounds.ymax)) {
    return false;
  }
  ix = std::min(nx - 1, static_cast<std::size_t>((x - bounds.xmin) /
                                                 (bounds.xmax - bounds.xmin) * nx));
  iy = std::min(ny - 1, static_cast<std::size_t>((y - bounds.ymin) /
                                                 (bounds.ymax - bounds.ymin) * ny));
  return true;
}

std::array<std::size_t, 2> Grid2D::argmax() const {
  const auto it = std::max_element(values.begin(), values.end());
  const std::size_t k = static_cast<std::size_t>(it - values.begin());
  return {k % nx, k / nx};
}

Grid2D Grid2D::normalized() const {
  Grid2D g = *this;
  double s = 0.0;
  for (double v : values) s += v;
  if (!(s > 0.0)) throw Error("cannot normalise a grid with no mass");
  for (double& v : g.values) v /= s;
  return g;
}

void write_csv(const Grid2D& g, std::ostream& os) {
  os << "# grid2d xmin=" << format_double(g.bounds.xmin)
     << " xmax=" << format_double(g.bounds.xmax)
     << " ymin=" << format_double(g.bounds.ymin)
     << " ymax=" << format_double(g.bounds.ymax) << " nx=" << g.nx
     << " ny=" << g.ny << '\n';
  for (std::size_t iy = 0; iy < g.ny; ++iy) {
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
      if (ix) os << ',';
      os << format_double(g.at(ix, iy));
    }
    os << '\n';
  }
}

Grid2D read_grid_csv(std::istream& is) {
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(is, line) || line.rfind("# grid2d", 0) != 0) {
    throw Error("line 1: missing '# grid2d' header");
  }
  Bounds2D b;
  long long nx = -1, ny = -1;
  std::istringstream hs(line.substr(8));
  std::string kv;
  while (hs >> kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("line 1: bad header entry " + kv);
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    if (key == "xmin") b.xmin = parse_double(val);
    else if (key == "xmax") b.xmax = parse_double(val);
    else if (key == "ymin") b.ymin = parse_double(val);
    else if (key == "ymax") b.ymax = parse_double(val);
    else if (key == "nx") nx = parse_int(val);
    else if (key == "ny") ny = parse_int(val);
    else throw Error("line 1: unknown header key " + key);
  }
  if (nx < 2 || ny < 2) throw Error("line 1: nx and ny must be at least 2");
  Grid2D g(b, static_cast<std::size_t>(nx), static_cast<std::size_t>(ny));
  for (std::size_t iy = 0; iy < g.ny; ++iy) {
    ++lineno;
    if (!std::getline(is, line)) {
      throw Error("line " + std::to_string(lineno) + ": missing grid row");
    }
    const auto cells = split(line, ',');
    if (cells.size() != g.nx) {
      throw Error("line " + std::to_string(lineno) + ": expected " +
                  std::to_string(g.nx) + " values, found " +
                  std::to_string(cells.size()));
    }
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
      try {
        g.at(ix, iy) = parse_double(cells[ix]);
      } catch (const Error& e) {
        throw Error("line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  return g;
}

void write_pgm(const Grid2D& g, std::ostream& os) {
  const auto [lo_it, hi_it] = std::minmax_element(g.values.begin(), g.values.end());
  const double lo = *lo_it, hi = *hi_it;
  const double range = hi > lo ? hi - lo : 1.0;
  os << "P2\n" << g.nx << ' ' << g.ny << "\n255\n";
  for (std::size_t r = 0; r < g.ny; ++r) {
    const std::size_t iy = g.ny - 1 - r;
    for (std::size_t ix = 0; ix < g.nx; ++ix) {
      if (ix) os << ' ';
      os << static_cast<int>(std::lround(255.0 * (g.at(ix, iy) - lo) / range));
    }
    os << '\n';
  }
}

double Grid1D::node(std::size_t i) const {
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(size() - 1);
}

double Grid1D::trapezoid() const {
  if (size() < 2) throw Error("Grid1D: need at least two nodes");
  const double h = (hi - lo) / static_cast<double>(size() - 1);
  double s = 0.5 * (values.front() + values.back());
  for (std::size_t i = 1; i + 1 < size(); ++i) s += values[i];
  return s * h;
}

std::vector<std::size_t> Grid1D::local_maxima() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i + 1 < size(); ++i) {
    if (values[i] > values[i - 1] && values[i] > values[i + 1]) out.push_back(i);
  }
  return out;
}

void write_csv(const Grid1D& g, std::ostream& os) {
  os << "z,value\n";
  for (std::size_t i = 0; i < g.size(); ++i) {
    os << format_double(g.node(i)) << ',' << format_double(g.values[i]) << '\n';
  }
}

double total_variation(const Grid2D& p, const Grid2D& q) {
  if (p.nx != q.nx || p.ny != q.ny) throw DimensionError("total_variation: grid shapes differ");
  const Grid2D a = p.normalized(), b = q.normalized();
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::abs(a.values[i] - b.values[i]);
  return 0.5 * s;
}

Grid2D density_grid(const EnergySpec& target, Bounds2D bounds, std::size_t nx,
                    std::size_t ny) {
  if (target.dim() != 2) throw DimensionError("density_grid: target must be 2D");
  Grid2D g(bounds, nx, ny);
  for (std::size_t iy = 0; iy < ny; ++iy) {
    for (std::size_t ix = 0; ix < nx; ++ix) {
      const double z[2] = {g.x_center(ix), g.y_center(iy)};
      g.at(ix, iy) = std::exp(target.log_density(z));
    }
  }
  return g;
}

namespace {

template <class Sample>
Grid2D histogram_impl(std::span<const Sample> samples, Bounds2D bounds,
                      std::size_t nx, std::size_t ny) {
  Grid2D g(bounds, nx, ny);
  std::size_t inside = 0;
  for (const auto& s : samples) {
    if (s.size() != 2) throw DimensionError("histogram_grid: samples must be 2D");
    std::size_t ix, iy;
    if (g.locate(s[0], s[1], ix, iy)) {
      g.at(ix, iy) += 1.0;
      ++inside;
    }
  }
  if (inside > 0) {
    for (double& v : g.values) v /= static_cast<double>(inside);
  }
  return g;
}

}  // namespace

Grid2D histogram_grid(std::span<const std::vector<double>> samples,
                      Bounds2D bounds, std::size_t nx, std::size_t ny) {
  return histogram_impl(samples, bounds, nx, ny);
}

Grid2D histogram_grid(std::span<const std::array<double, 2>> samples,
                      Bounds2D bounds, std::size_t nx, std::size_t ny) {
  return histogram_impl(samples, bounds, nx, ny);
}

std::vector<std::vector<double>> sample_final(const HierarchicalChain& chain,
                                              std::size_t n, Rng& rng,
                                              std::span<const double> cond) {
  ChainSampler sampler(chain);
  const DiagGaussian q0 = chain.initial(cond);
  std::vector<std::vector<double>> out(n, std::vector<double>(chain.config().latent_dim));
  for (auto& z : out) sampler.forward(q0, rng, cond, z);
  return out;
}

Grid2D density_grid(const HierarchicalChain& chain, Bounds2D bounds,
                    std::size_t nx, std::size_t ny, std::size_t n_samples,
                    Rng& rng) {
  if (chain.config().latent_dim != 2) throw DimensionError("density_grid: chain must be 2D");
  const auto samples = sample_final(chain, n_samples, rng);
  return histogram_grid(std::span<const std::vector<double>>(samples), bounds, nx, ny);
}

Grid1D true_posterior_grid(const NoiseDecoder& theta, std::array<double, 2> x,
                           double z_lo, double z_hi, std::size_t resolution) {
  if (resolution < 2) throw Error("true_posterior_grid: resolution must be >= 2");
  if (!(z_lo < z_hi)) throw Error("true_posterior_grid: degenerate bounds");
  Grid1D g{z_lo, z_hi, std::vector<double>(resolution)};
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < resolution; ++i) {
    g.values[i] = noise_model_log_joint(theta, x, g.node(i));
    top = std::max(top, g.values[i]);
  }
  for (double& v : g.values) v = std::exp(v - top);
  const double mass = g.trapezoid();
  for (double& v : g.values) v /= mass;
  return g;
}

std::vector<double> mode_coverage(std::span<const std::vector<double>> samples,
                                  std::span<const std::vector<double>> centers,
                                  double radius) {
  if (samples.empty()) throw Error("mode_coverage: no samples");
  if (centers.empty()) throw Error("mode_coverage: no centres");
  if (!(radius > 0.0)) throw Error("mode_coverage: radius must be positive");
  std::vector<double> counts(centers.size(), 0.0);
  for (const auto& s : samples) {
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (centers[c].size() != s.size()) throw DimensionError("mode_coverage: dimension mismatch");
      double d2 = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double d = s[i] - centers[c][i];
        d2 += d * d;
      }
      if (d2 < best_d2) {
        best_d2 = d2;
        best = c;
      }
    }
    if (best_d2 <= radius * radius) counts[best] += 1.0;
  }
  for (double& c : counts) c /= static_cast<double>(samples.size());
  return counts;
}

// ---------------------------------------------------------------------------
// Estimators

namespace {

/// Runs body(i) for i in [0, n) over `threads` workers in contiguous blocks.
template <class Body>
void parallel_for(std::size_t n, std::size_t threads, Body body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w * n / threads; i < (w + 1) * n / threads; ++i) body(i, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

NegKlEstimate negative_kl_estimate(const HierarchicalChain& chain,
                                   const DiagGaussian& q0,
                                   const EnergySpec& target, std::size_t N,
                                   std::size_t K, Rng& rng,
                                   const EstimateOptions& options) {
  if (N < 1 || K < 1) throw Error("negative_kl_estimate: N and K must be >= 1");
  if (chain.config().amortized) throw Error("negative_kl_estimate: chain must not be amortized");
  if (target.dim() != chain.config().latent_dim) {
    throw DimensionError("negative_kl_estimate: target dimension differs from chain");
  }
  const Rng base(rng.next_u64());
  const double log_k = std::log(static_cast<double>(K));
  std::vector<double> terms(N);
  const std::size_t threads = std::max<std::size_t>(1, options.threads);
  std::vector<ChainSampler> samplers;
  for (std::size_t w = 0; w < std::min(threads, N); ++w) samplers.emplace_back(chain);

  parallel_for(N, threads, [&](std::size_t n, std::size_t w) {
    ChainSampler& sampler = samplers[w];
    Rng r = base.split(n);
    std::vector<double> z(chain.config().latent_dim);
    std::vector<double> lw(K);
    sampler.forward(q0, r, {}, z);
    const double lf = target.log_density(z);
    for (std::size_t k = 0; k < K; ++k) {
      lw[k] = sampler.backward_log_weight(q0, z, r, {});
      if (!std::isfinite(lw[k])) {
        throw Error("negative_kl_estimate: non-finite weight at (n=" +
                    std::to_string(n) + ", k=" + std::to_string(k) + ")");
      }
    }
    terms[n] = lf - (log_sum_exp(lw) - log_k);
    if (!std::isfinite(terms[n])) {
      throw Error("negative_kl_estimate: non-finite term at n=" + std::to_string(n));
    }
  });

  double mean = 0.0;
  for (double t : terms) mean += t;
  mean /= static_cast<double>(N);
  double var = 0.0;
  for (double t : terms) var += (t - mean) * (t - mean);
  var = N > 1 ? var / static_cast<double>(N - 1) : 0.0;
  return {mean, std::sqrt(var / static_cast<double>(N))};
}

AisResult ais_log_z(const DiagGaussian& f0, const EnergySpec& target,
                    const AisOptions& opt, Rng& rng) {
  if (opt.n_steps < 1) throw Error("ais_log_z: n_steps must be >= 1");
  if (opt.n_chains < 1) throw Error("ais_log_z: n_chains must be >= 1");
  if (!(opt.step_size > 0.0)) throw Error("ais_log_z: step_size must be positive");
  if (f0.dim() != target.dim()) throw DimensionError("ais_log_z: dimension mismatch");
  const std::size_t d = f0.dim();
  const Rng base(rng.next_u64());
  std::vector<double> log_w(opt.n_chains, 0.0);
  AisResult result;
  std::size_t accepted_total = 0, proposed_total = 0;

  for (std::size_t j = 0; j < opt.n_chains; ++j) {
    Rng r = base.split(j);
    std::vector<double> z = f0.sample(r), prop(d);
    double l0 = f0.log_prob(z), lt = target.log_density(z);
    std::size_t accepted = 0;
    double prev_alpha = 0.0;
    for (std::size_t t = 1; t <= opt.n_steps; ++t) {
      const double alpha = t == opt.n_steps
                               ? 1.0
                               : static_cast<double>(t) / static_cast<double>(opt.n_steps);
      log_w[j] += (alpha - prev_alpha) * (lt - l0);
      prev_alpha = alpha;
      for (std::size_t s = 0; s < opt.mh_steps_per_level; ++s) {
        for (std::size_t i = 0; i < d; ++i) prop[i] = z[i] + opt.step_size * r.normal();
        const double p0 = f0.log_prob(prop), pt = target.log_density(prop);
        const double log_ratio =
            alpha * (pt - lt) + (1.0 - alpha) * (p0 - l0);
        ++proposed_total;
        if (std::log(r.uniform()) < log_ratio) {
          z.swap(prop);
          l0 = p0;
          lt = pt;
          ++accepted;
        }
      }
    }
    if (!std::isfinite(log_w[j])) throw Error("ais_log_z: non-finite weight in chain " + std::to_string(j));
    if (accepted == 0) ++result.zero_acceptance_chains;
    accepted_total += accepted;
  }
  result.log_z = log_sum_exp(log_w) - std::log(static_cast<double>(opt.n_chains));
  result.acceptance_rate =
      proposed_total ? static_cast<double>(accepted_total) / proposed_total : 0.0;
  return result;
}

}  // namespace avo
