#include <doctest.h>

#include <cmath>
#include <set>

#include "avo/dist.hpp"
#include "fd.hpp"

using namespace avo;

TEST_CASE("rng streams are reproducible and splittable") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  const Rng s1 = c.split(1), s2 = c.split(2);
  CHECK(s1.seed() != s2.seed());
  CHECK(Rng(42).split(1).seed() == s1.seed());
  // splitting does not advance the parent
  Rng d(42);
  (void)d.split(7);
  CHECK(d.next_u64() == Rng(42).next_u64());
}

TEST_CASE("uniform and index ranges") {
  Rng r(3);
  std::set<std::size_t> seen;
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    const std::size_t k = r.index(5);
    CHECK(k < 5);
    seen.insert(k);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("standard normal moments") {
  Rng r(11);
  const std::size_t n = 200000;
  double m1 = 0, m2 = 0, m4 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = r.normal();
    m1 += z;
    m2 += z * z;
    m4 += z * z * z * z;
  }
  m1 /= n;
  m2 /= n;
  m4 /= n;
  // tolerances are about 5 standard errors
  CHECK(std::abs(m1) < 5.0 / std::sqrt(double(n)));
  CHECK(std::abs(m2 - 1.0) < 5.0 * std::sqrt(2.0 / n));
  CHECK(std::abs(m4 - 3.0) < 5.0 * std::sqrt(96.0 / n));
}

TEST_CASE("diagonal Gaussian log density") {
  const DiagGaussian g({1.0, -2.0}, {0.5, 3.0});
  const std::vector<double> z{1.5, 1.0};
  const double expected = -std::log(0.5) - 0.5 * kLogTwoPi - 0.5 * 1.0 -
                          std::log(3.0) - 0.5 * kLogTwoPi - 0.5 * 1.0;
  CHECK(g.log_prob(z) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(DiagGaussian::standard(1).log_prob(std::vector<double>{0.0}) ==
        doctest::Approx(-0.5 * kLogTwoPi));
  const auto s = g.sample_reparam(std::vector<double>{2.0, -1.0});
  CHECK(s[0] == 2.0);
  CHECK(s[1] == -5.0);
  CHECK_THROWS_AS(DiagGaussian({0.0}, {0.0}), Error);
  CHECK_THROWS_AS(DiagGaussian({0.0, 1.0}, {1.0}), DimensionError);
  CHECK_THROWS_AS(g.log_prob(std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("log density integrates to one on a 1D grid") {
  const DiagGaussian g({0.3}, {0.7});
  const double h = 1e-3;
  double mass = 0.0;
  for (double z = -8.0; z <= 8.0; z += h) mass += std::exp(g.log_prob(std::vector<double>{z})) * h;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("batched constant gaussian matches per-row doubles") {
  Tape t;
  const DiagGaussian g({0.5, -1.0}, {1.5, 0.25});
  const GaussianVar gv = constant_gaussian(t, g, 3);
  CHECK(gv.dim() == 2);
  const std::vector<double> z{0.1, 0.2, -0.3, 0.4, 2.0, -1.0};
  const auto lp = log_prob(gv, t.constant(z)).value();
  REQUIRE(lp.size() == 3);
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(lp[r] == doctest::Approx(g.log_prob(std::span<const double>(z).subspan(2 * r, 2)))
                       .epsilon(1e-14));
  }
}

TEST_CASE("reparameterized sample gradient") {
  const double err = avo::test::max_grad_error(
      [](Tape& t, const std::vector<Var>& v) {
        const GaussianVar g{v[0], v[1]};
        const Var z = sample_reparam(g, t.constant(std::vector<double>{0.3, -1.1}));
        return log_prob(GaussianVar{t.constant(std::vector<double>{0.0, 0.0}),
                                    t.constant(std::vector<double>{1.0, 1.0})},
                        z);
      },
      {{0.4, -0.2}, {0.8, 1.3}});
  CHECK(err <= 1e-3);
}
