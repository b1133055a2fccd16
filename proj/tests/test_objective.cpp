#include <doctest.h>

#include <cmath>

#include "avo/objective.hpp"
#include "fd.hpp"

using namespace avo;

namespace {

HierarchicalChain chain_of(std::size_t T, std::size_t H, std::uint64_t seed) {
  ChainConfig c;
  c.T = T;
  c.hidden = H;
  Rng rng(seed);
  return HierarchicalChain::create(c, rng);
}

// Finite-difference check of a chain objective with respect to every
// parameter. The noise is replayed from a fixed seed so the objective is a
// deterministic function of the parameters.
// Only parameters with index in [first, last) are perturbed.
double chain_objective_error(HierarchicalChain& ch,
                             const std::function<Var(const BoundChain&, Rng&)>& obj,
                             std::size_t first = 0, std::size_t last = SIZE_MAX) {
  ParamSet params = ch.params();
  const std::vector<double> base = params.flatten();
  auto eval = [&](const std::vector<double>& flat, std::vector<double>* grad) {
    params.assign(flat);
    Tape t;
    BoundChain bc(t, ch, true);
    Rng rng(21);
    const Var y = obj(bc, rng);
    if (grad) {
      grad->assign(flat.size(), 0.0);
      bc.binding().gather(t.backward(y), *grad);
    }
    return y.scalar();
  };
  std::vector<double> g;
  eval(base, &g);
  std::vector<double> x = base;
  double worst = 0.0;
  for (std::size_t i = first; i < std::min(last, x.size()); ++i) {
    const double h = 1e-5;
    x[i] = base[i] + h;
    const double up = eval(x, nullptr);
    x[i] = base[i] - h;
    const double dn = eval(x, nullptr);
    x[i] = base[i];
    const double fd = (up - dn) / (2 * h);
    worst = std::max(worst, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6}));
  }
  params.assign(base);
  return worst;
}

}  // namespace

TEST_CASE("linear alphas") {
  const auto a = linear_alphas(10);
  REQUIRE(a.size() == 11);
  for (std::size_t t = 0; t <= 10; ++t) CHECK(a[t] == static_cast<double>(t) / 10.0);
  CHECK(a.front() == 0.0);
  CHECK(a.back() == 1.0);
  CHECK(linear_alphas(1) == std::vector<double>{0.0, 1.0});
  CHECK_THROWS_AS(linear_alphas(0), Error);
}

TEST_CASE("beta warm-up profile") {
  const BetaProfile p{0.01, 0.4};
  CHECK(p.at(0, 1000) == 0.01);
  CHECK(p.at(400, 1000) == 1.0);
  CHECK(p.at(999, 1000) == 1.0);
  CHECK(p.at(200, 1000) == doctest::Approx(0.01 + 0.99 * 0.5));
  // monotone and within (0, 1]
  double prev = 0.0;
  for (std::size_t s = 0; s <= 1000; s += 7) {
    const double b = p.at(s, 1000);
    CHECK(b >= prev);
    CHECK(b > 0.0);
    CHECK(b <= 1.0);
    prev = b;
  }
  CHECK(BetaProfile{0.01, 0.0}.at(0, 1000) == 1.0);
  CHECK_THROWS_AS((BetaProfile{0.0, 0.2}.validate()), Error);
  CHECK_THROWS_AS((BetaProfile{0.01, 1.5}.validate()), Error);
  // the ramp ends exactly at rho * total for the sweep fractions
  for (double rho : {0.2, 0.4, 0.6, 0.8}) {
    const auto end = static_cast<std::size_t>(std::llround(rho * 2000));
    CHECK(BetaProfile{0.01, rho}.at(end, 2000) == 1.0);
    CHECK(BetaProfile{0.01, rho}.at(end - 1, 2000) < 1.0);
  }
}

TEST_CASE("schedule validation and values") {
  Schedule s = Schedule::linear(4, 0.05, 0.5);
  CHECK(s.T() == 4);
  const auto v = schedule_values(s, 0, 100);
  CHECK(v.beta == 0.05);
  CHECK(v.alphas == s.alphas);
  CHECK_THROWS_AS(schedule_values(s, 101, 100), Error);
  s.alphas = {0.0, 0.6, 0.5, 1.0};
  CHECK_THROWS_AS(s.validate(), Error);
  s.alphas = {0.1, 1.0};
  CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("loss mode names round trip") {
  for (LossMode m : {LossMode::Elbo, LossMode::Avo, LossMode::LossCalibrated, LossMode::Iwae}) {
    CHECK(parse_loss_mode(loss_mode_name(m)) == m);
  }
  CHECK_THROWS_AS(parse_loss_mode("kl"), Error);
  CHECK_THROWS_AS((ObjectiveConfig{LossMode::Avo, 1.5, 10}.validate()), Error);
}

TEST_CASE("ELBO gradient matches central differences (T=2, H=4)") {
  HierarchicalChain ch = chain_of(2, 4, 1);
  const EnergySpec target = EnergySpec::from_name("a");
  for (double beta : {1.0, 0.3}) {
    CAPTURE(beta);
    const double err = chain_objective_error(ch, [&](const BoundChain& bc, Rng& rng) {
      Tape& t = bc.tape();
      SampleOptions o;
      o.batch = 3;
      const auto tr = sample_chain(bc, constant_gaussian(t, DiagGaussian::standard(2), 3), rng,
                                   {}, o);
      return mean(elbo(tr, target, beta));
    });
    CHECK(err <= 1e-3);
  }
}

TEST_CASE("AVO gradient matches central differences per layer (T=2, H=4)") {
  // The trace feeding layer t is detached, so the update of layer t is the
  // derivative of its own term with z_{t-1} held fixed. Perturbing only the
  // parameters of layer t leaves z_{t-1} unchanged, which makes finite
  // differences a valid oracle for that block.
  HierarchicalChain ch = chain_of(2, 4, 2);
  const EnergySpec target = EnergySpec::from_name("b");
  const EnergySpec f0 = EnergySpec::gaussian(DiagGaussian::standard(2));
  const std::size_t block = ch.params().size() / 2;
  for (std::size_t t = 1; t <= 2; ++t) {
    CAPTURE(t);
    const AnnealedTarget ft(f0, target, t / 2.0);
    const double err = chain_objective_error(
        ch,
        [&](const BoundChain& bc, Rng& rng) {
          const GaussianVar q0 = constant_gaussian(bc.tape(), DiagGaussian::standard(2), 3);
          return mean(avo_layer_loss(bc, t, q0, ft, rng));
        },
        (t - 1) * block, t * block);
    CHECK(err <= 1e-3);
  }
}

TEST_CASE("total AVO gradient is the sum of per-layer gradients") {
  HierarchicalChain ch = chain_of(2, 4, 3);
  const EnergySpec target = EnergySpec::from_name("c");
  const EnergySpec f0 = EnergySpec::gaussian(DiagGaussian::standard(2));
  ParamSet params = ch.params();
  auto grad_of = [&](const std::function<Var(const BoundChain&, Rng&)>& obj) {
    Tape t;
    BoundChain bc(t, ch, true);
    Rng rng(5);
    std::vector<double> g(params.size(), 0.0);
    bc.binding().gather(t.backward(obj(bc, rng)), g);
    return g;
  };
  const auto total = grad_of([&](const BoundChain& bc, Rng& rng) {
    return sum(total_avo_step_loss(bc, constant_gaussian(bc.tape(), DiagGaussian::standard(2), 4),
                                   f0, target, Schedule::linear(2), 1.0, rng));
  });
  std::vector<double> parts(params.size(), 0.0);
  for (std::size_t t = 1; t <= 2; ++t) {
    const auto g = grad_of([&](const BoundChain& bc, Rng& rng) {
      return sum(avo_layer_loss(bc, t, constant_gaussian(bc.tape(), DiagGaussian::standard(2), 4),
                                AnnealedTarget(f0, target, t / 2.0), rng));
    });
    for (std::size_t i = 0; i < g.size(); ++i) parts[i] += g[i];
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    CHECK(total[i] == doctest::Approx(parts[i]).epsilon(1e-9));
  }
}

TEST_CASE("AVO layer loss has no gradient into earlier layers") {
  HierarchicalChain ch = chain_of(3, 4, 3);
  const EnergySpec f0 = EnergySpec::gaussian(DiagGaussian::standard(2));
  const EnergySpec target = EnergySpec::from_name("d");
  for (std::size_t t = 1; t <= 3; ++t) {
    Tape tape;
    BoundChain bc(tape, ch, true);
    Rng rng(4);
    const AnnealedTarget ft(f0, target, static_cast<double>(t) / 3.0);
    const Var loss = avo_layer_loss(bc, t, constant_gaussian(tape, DiagGaussian::standard(2)),
                                    ft, rng);
    const Gradients g = tape.backward(loss);
    for (std::size_t earlier = 1; earlier < t; ++earlier) {
      for (const Var& leaf : bc.layer_leaves(earlier)) {
        for (double v : g.of(leaf)) CHECK(v == 0.0);
      }
    }
    double own = 0.0;
    for (const Var& leaf : bc.layer_leaves(t)) {
      for (double v : g.of(leaf)) own += std::abs(v);
    }
    CHECK(own > 0.0);
  }
  CHECK_THROWS_AS(
      [&] {
        Tape tape;
        BoundChain bc(tape, ch, true);
        Rng rng(1);
        avo_layer_loss(bc, 4, constant_gaussian(tape, DiagGaussian::standard(2)),
                       AnnealedTarget(f0, target, 1.0), rng);
      }(),
      Error);
}

TEST_CASE("total AVO loss equals the sum of layer terms on one trace") {
  HierarchicalChain ch = chain_of(3, 4, 5);
  const EnergySpec f0 = EnergySpec::gaussian(DiagGaussian::standard(2));
  const EnergySpec target = EnergySpec::from_name("e");
  const Schedule s = Schedule::linear(3);
  Tape t;
  BoundChain bc(t, ch, true);
  Rng r1(8), r2(8);
  const Var total =
      total_avo_step_loss(bc, constant_gaussian(t, DiagGaussian::standard(2)), f0, target, s,
                          1.0, r1);
  SampleOptions o;
  o.detach_between_layers = true;
  const auto tr = sample_chain(bc, constant_gaussian(t, DiagGaussian::standard(2)), r2, {}, o);
  double manual = 0.0;
  for (std::size_t k = 1; k <= 3; ++k) {
    const auto z = tr.z[k].value();
    manual += AnnealedTarget(f0, target, s.alphas[k]).log_density(z) +
              tr.log_r_bwd[k - 1].scalar() - tr.log_q_fwd[k - 1].scalar();
  }
  CHECK(total.scalar() == doctest::Approx(manual).epsilon(1e-12));
}

TEST_CASE("ELBO is exact when the chain trace is scored against its own density") {
  // With T layers whose forward and backward nets coincide in value the
  // double and tape ELBOs must agree.
  HierarchicalChain ch = chain_of(2, 4, 6);
  const EnergySpec target = EnergySpec::from_name("c");
  Rng r1(3), r2(3);
  const ChainTrace tr = sample_chain(ch, DiagGaussian::standard(2), r1);
  Tape t;
  BoundChain bc(t, ch, false);
  const auto tv = sample_chain(bc, constant_gaussian(t, DiagGaussian::standard(2)), r2);
  CHECK(elbo(tr, target, 0.4) == doctest::Approx(elbo(tv, target, 0.4).scalar()).epsilon(1e-12));
  CHECK_THROWS_AS(elbo(tr, target, 0.0), Error);
}

TEST_CASE("IWAE bound: exact proposal gives log Z, bound grows with K") {
  const DiagGaussian g({0.2, -0.3}, {0.8, 1.1});
  Rng rng(1);
  // target = 3 * g, so every weight equals log 3
  const EnergySpec scaled = EnergySpec::gaussian(g, std::log(3.0));
  CHECK(iwae_bound(g, scaled, 50, rng) == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  const EnergySpec target = EnergySpec::four_mode();
  const DiagGaussian prop = DiagGaussian::standard(2);
  double prev = -1e300;
  for (std::size_t K : {1, 10, 100}) {
    const int reps = 400;
    double m = 0.0, m2 = 0.0;
    for (int r = 0; r < reps; ++r) {
      const double v = iwae_bound(prop, target, K, rng);
      m += v;
      m2 += v * v;
    }
    m /= reps;
    const double se = std::sqrt(std::max(0.0, m2 / reps - m * m) / reps);
    CHECK(m + 2.0 * se >= prev);
    CHECK(m <= 0.0 + 3.0 * se);  // a lower bound on log Z = 0
    prev = m;
  }
  Tape t;
  const Var w = t.constant(std::vector<double>{0.0, std::log(3.0), 1.0, 1.0});
  const auto per = iwae_bound(w, 2).value();
  CHECK(per[0] == doctest::Approx(std::log(2.0)));
  CHECK(per[1] == doctest::Approx(1.0));
  CHECK_THROWS_AS(iwae_bound(w, 3), DimensionError);
}

TEST_CASE("loss-calibrated selection frequency") {
  Rng rng(10);
  int avo = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) avo += loss_calibrated_select(0.3, rng) == LossMode::Avo;
  CHECK(avo / double(n) == doctest::Approx(0.3).epsilon(0.05));
  CHECK(loss_calibrated_select(0.0, rng) == LossMode::Elbo);
  CHECK(loss_calibrated_select(1.0, rng) == LossMode::Avo);
}
