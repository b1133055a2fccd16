#include <doctest.h>

#include <cmath>
#include <sstream>

#include "avo/train.hpp"

using namespace avo;

namespace {

FitConfig quick_config(LossMode mode, std::uint64_t seed) {
  FitConfig c;
  c.mode = mode;
  c.seed = seed;
  c.T = 2;
  c.hidden = 8;
  c.steps = 60;
  c.batch = 16;
  c.checkpoint_every = 20;
  c.checkpoint_n = 20;
  c.checkpoint_k = 4;
  c.final_n = 100;
  c.final_k = 8;
  c.log_z = 0.0;
  return c;
}

}  // namespace

TEST_CASE("adam first step moves every coordinate by lr against the gradient sign") {
  std::vector<double> p{1.0, -2.0, 0.5};
  AdamState st(3, 0.01);
  adam_step(p, std::vector<double>{3.0, -0.2, 0.0}, st);
  CHECK(p[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  CHECK(p[2] == 0.5);
  CHECK(st.step == 1);
  CHECK_THROWS_AS(adam_step(p, std::vector<double>{1.0}, st), DimensionError);
}

TEST_CASE("adam minimises a quadratic") {
  std::vector<double> x{3.0, -4.0};
  AdamState st(2, 0.05);
  for (int i = 0; i < 2000; ++i) {
    adam_step(x, std::vector<double>{2 * x[0], 2 * x[1]}, st);
  }
  CHECK(std::abs(x[0]) < 1e-2);
  CHECK(std::abs(x[1]) < 1e-2);
}

TEST_CASE("fit config validation") {
  FitConfig c;
  CHECK_NOTHROW(c.validate());
  c.mode = LossMode::Iwae;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.rho = 1.2;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("fit_energy is deterministic for a fixed seed") {
  const EnergySpec t = EnergySpec::from_name("a");
  for (LossMode m : {LossMode::Elbo, LossMode::Avo, LossMode::LossCalibrated}) {
    CAPTURE(loss_mode_name(m));
    auto r1 = fit_energy(t, quick_config(m, 3));
    auto r2 = fit_energy(t, quick_config(m, 3));
    REQUIRE(r1.series.size() == r2.series.size());
    for (std::size_t i = 0; i < r1.series.size(); ++i) {
      CHECK(r1.series[i].metric == r2.series[i].metric);
      CHECK(r1.series[i].value == r2.series[i].value);
    }
    CHECK(r1.chain.params().flatten() == r2.chain.params().flatten());
    auto r3 = fit_energy(t, quick_config(m, 4));
    CHECK(r3.chain.params().flatten() != r1.chain.params().flatten());
  }
}

TEST_CASE("fitting a Gaussian target reaches a small KL") {
  const EnergySpec g = EnergySpec::gaussian(DiagGaussian({1.0, -0.5}, {0.6, 0.8}));
  for (LossMode m : {LossMode::Elbo, LossMode::Avo}) {
    CAPTURE(loss_mode_name(m));
    FitConfig c;
    c.mode = m;
    c.T = 2;
    c.hidden = 16;
    c.steps = 1500;
    c.checkpoint_every = 50;
    c.checkpoint_n = 100;
    c.checkpoint_k = 10;
    c.final_n = 1000;
    c.final_k = 50;
    c.log_z = 0.0;
    const auto r = fit_energy(g, c);
    CHECK(r.final.negative_kl >= -0.1);
    CHECK(r.final.negative_kl <= 0.05);
    // the objective is eventually no worse than at the start
    std::vector<double> obj;
    for (const auto& p : r.series) {
      if (p.metric == "objective") obj.push_back(p.value);
    }
    REQUIRE(obj.size() >= 20);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
      first += obj[i] / 10.0;
      last += obj[obj.size() - 1 - i] / 10.0;
    }
    CHECK(last >= first);
  }
}

TEST_CASE("series contains the documented metrics") {
  const auto r = fit_energy(EnergySpec::from_name("b"), quick_config(LossMode::Avo, 1));
  bool has_loss = false, has_kl = false, has_beta = false;
  for (const auto& p : r.series) {
    has_loss |= p.metric == "objective";
    has_kl |= p.metric == "neg_kl";
    has_beta |= p.metric == "beta";
  }
  CHECK(has_loss);
  CHECK(has_kl);
  CHECK(has_beta);
  CHECK(r.final.n_samples == 100);
  CHECK(r.final.k_inner == 8);
  CHECK(r.final.negative_kl == doctest::Approx(r.final.negative_kl_shifted - r.final.log_z));
}

TEST_CASE("summary statistics over trials") {
  std::vector<SweepCell> cells;
  for (double v : {1.0, 2.0, 4.0}) {
    SweepCell c;
    c.target = "a";
    c.mode = LossMode::Avo;
    c.rho = 0.2;
    c.ok = true;
    c.final.negative_kl = v;
    cells.push_back(c);
  }
  SweepCell failed = cells[0];
  failed.ok = false;
  failed.final.negative_kl = 1e9;
  cells.push_back(failed);
  const auto rows = summarize(cells);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].n_ok == 3);
  CHECK(rows[0].mean == doctest::Approx(7.0 / 3.0));
  CHECK(rows[0].std == doctest::Approx(std::sqrt(((1 - 7.0 / 3) * (1 - 7.0 / 3) +
                                                  (2 - 7.0 / 3) * (2 - 7.0 / 3) +
                                                  (4 - 7.0 / 3) * (4 - 7.0 / 3)) /
                                                 2.0)));
}

TEST_CASE("sweep orders cells and assigns consecutive seeds") {
  SweepConfig s;
  s.targets = {"a", "d"};
  s.modes = {LossMode::Elbo, LossMode::Avo};
  s.rhos = {0.0, 0.4};
  s.trials = 2;
  s.seed_base = 100;
  s.fit = quick_config(LossMode::Avo, 0);
  s.fit.steps = 10;
  s.fit.checkpoint_every = 10;
  s.fit.log_z.reset();
  s.fit.ais.n_steps = 20;
  s.fit.ais.n_chains = 8;
  s.threads = 2;
  const SweepResult r = robustness_sweep(s);
  REQUIRE(r.cells.size() == 16);
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    const auto& c = r.cells[i];
    CHECK(c.seed == 100 + i);
    CHECK(c.target == (i < 8 ? "a" : "d"));
    CHECK(c.mode == ((i / 4) % 2 == 0 ? LossMode::Elbo : LossMode::Avo));
    CHECK(c.rho == ((i / 2) % 2 == 0 ? 0.0 : 0.4));
    CHECK(c.trial == i % 2);
    CHECK(c.ok);
  }
  CHECK(r.summary.size() == 8);
  CHECK(r.log_z.size() == 2);

  // identical results with one worker
  s.threads = 1;
  const SweepResult one = robustness_sweep(s);
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    CHECK(one.cells[i].final.negative_kl == r.cells[i].final.negative_kl);
  }

  // rho = 0 matches a plain run with the cell's seed
  FitConfig plain = s.fit;
  plain.mode = LossMode::Elbo;
  plain.seed = 100;
  plain.rho = 0.0;
  plain.log_z = r.log_z[0].second;
  CHECK(fit_energy(EnergySpec::from_name("a"), plain).final.negative_kl ==
        r.cells[0].final.negative_kl);
}

TEST_CASE("csv writers") {
  std::ostringstream m;
  write_metrics_header(m);
  write_metrics_rows(m, "a", "avo", 0.2, 3, {{10, "objective", 1.5}});
  CHECK(m.str() == "target,mode,rho,trial,step,metric,value\na,avo,0.2,3,10,objective,1.5\n");
  std::ostringstream s;
  write_summary_csv(s, {{"b", LossMode::Elbo, 0.4, 9, -1.25, 0.5}});
  CHECK(s.str() == "target,mode,rho,n_ok,mean_neg_kl,std_neg_kl\nb,elbo,0.4,9,-1.25,0.5\n");
}

TEST_CASE("thread count resolution") {
  CHECK(sweep_threads(3) == 3);
  CHECK(sweep_threads(0) >= 1);
}
