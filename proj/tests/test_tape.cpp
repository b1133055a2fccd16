#include <doctest.h>

#include <cmath>
#include <limits>

#include "avo/tape.hpp"
#include "fd.hpp"

using namespace avo;
using avo::test::max_grad_error;

namespace {

const std::vector<double> kX{0.3, -1.2, 0.7, 2.1};
const std::vector<double> kY{1.1, 0.4, -0.9, 0.25};
const std::vector<double> kPos{0.5, 1.3, 2.2, 0.9};

// Reduce a vector to a scalar with non-uniform weights so every entry of the
// adjoint is exercised.
Var weighted(Tape& t, Var v) {
  std::vector<double> w(v.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.7 + 0.3 * static_cast<double>(i);
  return dot(v, t.constant(w));
}

}  // namespace

TEST_CASE("unary ops match central differences") {
  using Fn = Var (*)(Var);
  const std::vector<std::pair<const char*, Fn>> ops{
      {"neg", [](Var a) { return neg(a); }},
      {"exp", [](Var a) { return exp(a); }},
      {"tanh", [](Var a) { return tanh(a); }},
      {"sin", [](Var a) { return sin(a); }},
      {"cos", [](Var a) { return cos(a); }},
      {"square", [](Var a) { return square(a); }},
      {"sigmoid", [](Var a) { return sigmoid(a); }},
      {"softplus", [](Var a) { return softplus(a); }},
      {"relu", [](Var a) { return relu(a); }},
      {"elu", [](Var a) { return elu(a); }},
      {"scale", [](Var a) { return scale(a, -2.5); }},
      {"shift", [](Var a) { return shift(a, 0.75); }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    const double err = max_grad_error(
        [op](Tape& t, const std::vector<Var>& v) { return weighted(t, op(v[0])); }, {kX});
    CHECK(err <= 1e-3);
  }
  for (auto op : {+[](Var a) { return log(a); }, +[](Var a) { return sqrt(a); }}) {
    const double err = max_grad_error(
        [op](Tape& t, const std::vector<Var>& v) { return weighted(t, op(v[0])); }, {kPos});
    CHECK(err <= 1e-3);
  }
}

TEST_CASE("binary elementwise ops and broadcasting match central differences") {
  using Fn = Var (*)(Var, Var);
  const std::vector<std::pair<const char*, Fn>> ops{
      {"add", [](Var a, Var b) { return a + b; }},
      {"sub", [](Var a, Var b) { return a - b; }},
      {"mul", [](Var a, Var b) { return a * b; }},
      {"div", [](Var a, Var b) { return a / b; }},
      {"log_add_exp", [](Var a, Var b) { return log_add_exp(a, b); }},
      {"hypot", [](Var a, Var b) { return hypot(a, b); }},
  };
  for (const auto& [name, op] : ops) {
    CAPTURE(name);
    auto f = [op](Tape& t, const std::vector<Var>& v) { return weighted(t, op(v[0], v[1])); };
    CHECK(max_grad_error(f, {kX, kY}) <= 1e-3);
    // size-1 operand on either side
    CHECK(max_grad_error(f, {{0.8}, kY}) <= 1e-3);
    CHECK(max_grad_error(f, {kX, {1.7}}) <= 1e-3);
  }
}

TEST_CASE("reductions and structural ops match central differences") {
  const std::vector<double> six{0.3, -1.2, 0.7, 2.1, -0.4, 0.9};
  auto check = [](auto f, std::vector<std::vector<double>> xs) {
    CHECK(max_grad_error(f, std::move(xs)) <= 1e-3);
  };
  check([](Tape&, const std::vector<Var>& v) { return sum(v[0]); }, {kX});
  check([](Tape& t, const std::vector<Var>& v) { return weighted(t, sum(v[0], 2)); }, {six});
  check([](Tape&, const std::vector<Var>& v) { return mean(v[0]); }, {kX});
  check([](Tape&, const std::vector<Var>& v) { return log_sum_exp(v[0]); }, {kX});
  check([](Tape& t, const std::vector<Var>& v) { return weighted(t, log_sum_exp(v[0], 3)); },
        {six});
  check([](Tape&, const std::vector<Var>& v) { return norm2(v[0]); }, {kX});
  check([](Tape&, const std::vector<Var>& v) { return dot(v[0], v[1]); }, {kX, kY});
  check([](Tape& t, const std::vector<Var>& v) { return weighted(t, matvec(v[0], v[1])); },
        {six, {0.5, -1.5, 2.0}});
  // batched affine: 2 rows of width 3 through a 2x3 map
  check([](Tape& t, const std::vector<Var>& v) { return weighted(t, affine(v[0], v[1], v[2])); },
        {six, six, {0.1, -0.2}});
  check([](Tape& t, const std::vector<Var>& v) { return weighted(t, broadcast(v[0], 4)); },
        {{0.6}});
  check([](Tape& t, const std::vector<Var>& v) { return weighted(t, concat(v[0], v[1])); },
        {kX, {0.2, 0.3}});
  check([](Tape& t, const std::vector<Var>& v) {
          return weighted(t, row_concat(v[0], v[1], 2));
        },
        {kX, {0.2, 0.3}});
  check([](Tape&, const std::vector<Var>& v) { return element(v[0], 2) * element(v[0], 3); },
        {kX});
  check([](Tape& t, const std::vector<Var>& v) { return weighted(t, column(v[0], 1, 3)); },
        {six});
  check([](Tape& t, const std::vector<Var>& v) {
          return weighted(t, gauss_log_prob(v[0], v[1], v[2], 2));
        },
        {kX, kPos, kY});
  check([](Tape&, const std::vector<Var>& v) { return gauss_log_prob(v[0], v[1], v[2]); },
        {kX, kPos, kY});
  check([](Tape& t, const std::vector<Var>& v) {
          return weighted(t, gated_mix(v[0], v[1], v[2]));
        },
        {kX, kY, kPos});
  check([](Tape&, const std::vector<Var>& v) { return sum(2.0 / v[0]); }, {kPos});
}

TEST_CASE("forward values of structural ops") {
  Tape t;
  const Var a = t.constant(std::vector<double>{1, 2, 3, 4});
  const Var b = t.constant(std::vector<double>{10, 20});
  const auto rc = row_concat(a, b, 2).value();
  CHECK(std::vector<double>(rc.begin(), rc.end()) == std::vector<double>{1, 2, 10, 3, 4, 20});
  const auto col = column(a, 1, 2).value();
  CHECK(std::vector<double>(col.begin(), col.end()) == std::vector<double>{2, 4});
  const auto seg = sum(a, 2).value();
  CHECK(std::vector<double>(seg.begin(), seg.end()) == std::vector<double>{3, 7});
  // W = [[1, 0], [0, 2]], two rows of x
  const Var w = t.constant(std::vector<double>{1, 0, 0, 2});
  const auto y = affine(w, a, t.constant(std::vector<double>{0.5, -0.5})).value();
  CHECK(std::vector<double>(y.begin(), y.end()) == std::vector<double>{1.5, 3.5, 3.5, 7.5});
  CHECK(hypot(t.constant(3.0), t.constant(4.0)).scalar() == doctest::Approx(5.0));
  CHECK(log_add_exp(t.constant(0.0), t.constant(0.0)).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("gauss_log_prob matches the closed form") {
  Tape t;
  const Var mu = t.constant(std::vector<double>{0.0, 1.0});
  const Var sd = t.constant(std::vector<double>{1.0, 2.0});
  const Var z = t.constant(std::vector<double>{0.5, -1.0});
  const double expected = -0.5 * 0.25 - 0.5 * std::log(2 * M_PI) - std::log(2.0) -
                          0.5 * 1.0 - 0.5 * std::log(2 * M_PI);
  CHECK(gauss_log_prob(mu, sd, z).scalar() == doctest::Approx(expected).epsilon(1e-14));
  const auto rows = gauss_log_prob(mu, sd, z, 1).value();
  CHECK(rows.size() == 2);
  CHECK(rows[0] + rows[1] == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("stable scalar helpers") {
  CHECK(softplus(800.0) == 800.0);
  CHECK(softplus(-800.0) >= 0.0);
  CHECK(sigmoid(-800.0) == doctest::Approx(0.0));
  CHECK(log_add_exp(1000.0, 1000.0) == doctest::Approx(1000.0 + std::log(2.0)));
  const double ninf = -std::numeric_limits<double>::infinity();
  CHECK(log_add_exp(ninf, ninf) == ninf);
  const std::vector<double> xs{1000.0, 1000.0};
  CHECK(log_sum_exp(xs) == doctest::Approx(1000.0 + std::log(2.0)));
}

TEST_CASE("detach blocks gradient flow") {
  Tape t;
  const Var x = t.variable(std::vector<double>{1.5, -0.5});
  const Var y = sum(square(t.detach(x)) + x);
  const Gradients g = t.backward(y);
  const auto gx = g.of(x);
  CHECK(gx[0] == 1.0);
  CHECK(gx[1] == 1.0);
  CHECK(t.detach(x).detached());
  CHECK_FALSE(t.detach(x).requires_grad());
}

TEST_CASE("constants receive no adjoint and do not require gradients") {
  Tape t;
  const Var c = t.constant(2.0);
  const Var x = t.variable(3.0);
  const Var y = c * x;
  CHECK_FALSE(c.requires_grad());
  CHECK(y.requires_grad());
  const Gradients g = t.backward(y);
  CHECK(g.scalar(x) == 2.0);
  CHECK(g.scalar(c) == 0.0);
}

TEST_CASE("non-finite values raise NumericError naming the node") {
  Tape t;
  const Var x = t.variable(std::vector<double>{1.0, -1.0});
  const std::size_t before = t.size();
  try {
    (void)log(x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.node() == before);
    CHECK(std::string(e.what()).find("log") != std::string::npos);
  }
  CHECK(t.size() == before);  // failed node rolled back
  CHECK_THROWS_AS(exp(t.variable(1000.0)), NumericError);
  CHECK_THROWS_AS(t.variable(std::numeric_limits<double>::quiet_NaN()), NumericError);
  CHECK_THROWS_AS(sqrt(t.constant(-1.0)), NumericError);
  CHECK_THROWS_AS(gauss_log_prob(t.constant(0.0), t.constant(0.0), t.constant(1.0)),
                  NumericError);
  // the input leaves survive (1 + 1 + 3), the failed nodes and the NaN leaf do not
  CHECK(t.size() == before + 5);
}

TEST_CASE("shape errors") {
  Tape t;
  const Var a = t.variable(std::vector<double>{1, 2, 3});
  const Var b = t.variable(std::vector<double>{1, 2});
  CHECK_THROWS_AS(a + b, DimensionError);
  CHECK_THROWS_AS(dot(a, b), DimensionError);
  CHECK_THROWS_AS(sum(a, 2), DimensionError);
  CHECK_THROWS_AS(column(a, 3, 3), DimensionError);
  CHECK_THROWS_AS(row_concat(a, b, 2), DimensionError);
  CHECK_THROWS_AS(element(a, 3), DimensionError);
  CHECK_THROWS_AS(t.backward(a), DimensionError);
  Tape other;
  CHECK_THROWS_AS(a + other.variable(1.0), Error);
}

TEST_CASE("clear keeps the tape reusable and gradients are fresh per backward") {
  Tape t;
  for (int rep = 0; rep < 3; ++rep) {
    t.clear();
    const Var x = t.variable(2.0);
    const Gradients g = t.backward(x * x);
    CHECK(g.scalar(x) == 4.0);
  }
}
