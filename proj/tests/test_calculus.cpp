#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mechdiag/calculus.hpp"
#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

using namespace mechdiag;

namespace {

Vec v2(double a, double b) {
  Vec out(2);
  out << a, b;
  return out;
}

VectorField constant_field(double a, double b) {
  return {2, [=](const Vec&) { return v2(a, b); }, {}};
}

// X = d/dx, Y = x d/dy; bracket is d/dy everywhere.
VectorField shear_field() {
  return {2, [](const Vec& p) { return v2(0.0, p(0)); }, {}};
}

}  // namespace

TEST_CASE("jacobian of linear and identity maps") {
  Mat a(2, 2);
  a << 2, 0, 0, 3;
  const Mat j = jacobian([&](const Vec& x) { return Vec(a * x); }, v2(1, 1));
  CHECK((j - a).cwiseAbs().maxCoeff() < 1e-9);

  const Mat id = jacobian([](const Vec& x) { return x; }, v2(-4, 7));
  CHECK((id - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("jacobian of (xy, x+y) at (2,3)") {
  const Mat j = jacobian([](const Vec& x) { return v2(x(0) * x(1), x(0) + x(1)); }, v2(2, 3));
  Mat expected(2, 2);
  expected << 3, 2, 1, 1;
  CHECK((j - expected).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("jacobian matches analytic derivatives of random cubics") {
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    Rng rng(7, trial);
    Vec c(6);
    for (int i = 0; i < 6; ++i) c(i) = rng.uniform(-2, 2);
    const Vec p = v2(rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5));
    auto f = [&](const Vec& x) {
      return v2(c(0) * x(0) * x(0) * x(0) + c(1) * x(0) * x(1),
                c(2) * x(1) * x(1) * x(1) + c(3) * x(0) * x(0) * x(1) + c(4) * x(1) + c(5));
    };
    Mat analytic(2, 2);
    analytic << 3 * c(0) * p(0) * p(0) + c(1) * p(1), c(1) * p(0),
        2 * c(3) * p(0) * p(1), 3 * c(2) * p(1) * p(1) + c(3) * p(0) * p(0) + c(4);
    const Mat j = jacobian(f, p);
    const double rel = (j - analytic).norm() / std::max(1.0, analytic.norm());
    CHECK(rel <= 1e-6);
    DiffScheme rich;
    rich.richardson = true;
    CHECK((jacobian(f, p, rich) - analytic).norm() / std::max(1.0, analytic.norm()) <= 1e-8);
  }
}

TEST_CASE("forward differences are first order") {
  DiffScheme fwd;
  fwd.method = DiffMethod::Forward;
  fwd.step = 1e-6;
  const Mat j = jacobian([](const Vec& x) { return Vec(x.array().square()); }, v2(1, 2), fwd);
  CHECK(std::abs(j(0, 0) - 2.0) < 1e-4);
  CHECK(std::abs(j(1, 1) - 4.0) < 1e-4);
}

TEST_CASE("jacobian errors") {
  CHECK_THROWS_AS(jacobian([](const Vec& x) { return Vec(x.array().log()); }, v2(0.0, 1.0)),
                  NumericalDomainError);
  const Box box = Box::uniform(2, 0.0, 1.0);
  CHECK_THROWS_AS(jacobian([](const Vec& x) { return x; }, v2(1.0, 0.5), {}, box),
                  NumericalDomainError);
  CHECK_NOTHROW(jacobian([](const Vec& x) { return x; }, v2(0.5, 0.5), {}, box));
}

TEST_CASE("gradient and directional derivative") {
  auto f = [](const Vec& x) { return x(0) * x(0) * x(1); };
  const Vec g = gradient(f, v2(3, 2));
  CHECK(g(0) == doctest::Approx(12.0).epsilon(1e-9));
  CHECK(g(1) == doctest::Approx(9.0).epsilon(1e-9));
  CHECK(directional_derivative(f, v2(3, 2), v2(1, 1)) == doctest::Approx(21.0).epsilon(1e-9));
}

TEST_CASE("lie bracket examples") {
  const Vec zero = lie_bracket(constant_field(1, 0), constant_field(0, 1), v2(0.3, -2));
  CHECK(zero.norm() < 1e-12);

  const Vec b = lie_bracket(constant_field(1, 0), shear_field(), v2(1, 0));
  CHECK(std::abs(b(0)) < 1e-9);
  CHECK(std::abs(b(1) - 1.0) < 1e-9);

  const VectorField rot{2, [](const Vec& p) { return v2(-p(1), p(0) * p(0)); }, {}};
  CHECK(lie_bracket(rot, rot, v2(0.4, 0.2)).norm() < 1e-12);

  const VectorField three{3, [](const Vec& p) { return p; }, {}};
  CHECK_THROWS_AS(lie_bracket(rot, three, v2(0, 0)), ShapeError);
}

TEST_CASE("lie bracket is antisymmetric on random polynomial fields") {
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(11, trial);
    Vec c(8);
    for (int i = 0; i < 8; ++i) c(i) = rng.uniform(-1, 1);
    const VectorField x{2, [c](const Vec& p) { return v2(c(0) * p(1) * p(1), c(1) * p(0) + c(2) * p(0) * p(1)); }, {}};
    const VectorField y{2, [c](const Vec& p) { return v2(c(3) + c(4) * p(0) * p(0) * p(0), c(5) * p(1) + c(6) * p(0) * p(1) + c(7)); }, {}};
    const Vec p = v2(rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec xy = lie_bracket(x, y, p);
    const Vec yx = lie_bracket(y, x, p);
    CHECK((xy + yx).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("flow commutator witness") {
  CHECK(flow_commutator_witness(constant_field(1, 0), constant_field(0, 1), v2(0.2, 0.1), 1e-3) < 1e-8);

  const double w = flow_commutator_witness(constant_field(1, 0), shear_field(), v2(1, 0), 1e-3);
  CHECK(std::abs(w - 1.0) < 1e-2);

  const double w1 = flow_commutator_witness(constant_field(1, 0), shear_field(), v2(1, 0), 4e-3);
  const double w2 = flow_commutator_witness(constant_field(1, 0), shear_field(), v2(1, 0), 2e-3);
  const double w3 = flow_commutator_witness(constant_field(1, 0), shear_field(), v2(1, 0), 1e-3);
  CHECK(std::abs(w2 - w1) < 1e-3);
  CHECK(std::abs(w3 - w2) < 1e-3);
}

TEST_CASE("flow commutator tracks the bracket norm for polynomial fields") {
  const VectorField x{2, [](const Vec& p) { return v2(1.0 + p(1) * p(1), 0.5 * p(0)); }, {}};
  const VectorField y{2, [](const Vec& p) { return v2(p(0) * p(1), 1.0 - p(0) * p(0)); }, {}};
  for (const Vec& p : {v2(0.3, 0.4), v2(-0.5, 0.2), v2(0.1, -0.7)}) {
    const double bracket = lie_bracket(x, y, p).norm();
    const double witness = flow_commutator_witness(x, y, p, 1e-3);
    CHECK(std::abs(witness / bracket - 1.0) < 0.05);
  }
}

TEST_CASE("flow leaving its domain is an error") {
  VectorField x = constant_field(1, 0);
  x.domain = Box::uniform(2, -1.0, 1.0);
  VectorField y = constant_field(0, 1);
  y.domain = x.domain;
  CHECK_THROWS_AS(flow_commutator_witness(x, y, v2(0.99, 0), 0.1), NumericalDomainError);
  CHECK_NOTHROW(flow_commutator_witness(x, y, v2(0.0, 0.0), 0.1));
}

namespace {

// Two independent coins with success probabilities theta(0), theta(1).
ParametricSampler coins(bool coupled) {
  ParametricSampler s;
  s.parameter_dim = 2;
  auto probs = [coupled](const Vec& th) {
    if (!coupled) return v2(th(0), th(1));
    const double p = std::clamp(th(0) + th(1), 0.0, 1.0);
    return v2(p, p);
  };
  s.sample = [probs, coupled](const Vec& th, Rng& rng) {
    const Vec p = probs(th);
    if (coupled) return Vec::Constant(1, rng.bernoulli(p(0)) ? 1.0 : 0.0).eval();
    return v2(rng.bernoulli(p(0)) ? 1.0 : 0.0, rng.bernoulli(p(1)) ? 1.0 : 0.0);
  };
  s.log_density = [probs, coupled](const Vec& x, const Vec& th) {
    const Vec p = probs(th);
    double l = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) l += std::log(x(i) > 0.5 ? p(i) : 1.0 - p(i));
    return l;
  };
  return s;
}

}  // namespace

TEST_CASE("fisher of independent coins is diagonal") {
  const MetricEstimate est = fisher_estimate(coins(false), v2(0.5, 0.5), 20000, 3);
  CHECK(est.sample_count == 20000);
  CHECK(est.matrix(0, 0) == doctest::Approx(4.0).epsilon(1e-6));
  CHECK(est.matrix(1, 1) == doctest::Approx(4.0).epsilon(1e-6));
  CHECK(std::abs(est.matrix(0, 1)) <= 3 * est.standard_error(0, 1));
  CHECK(est.matrix(0, 1) == est.matrix(1, 0));
}

TEST_CASE("fisher of a single coin is 1/(p(1-p))") {
  ParametricSampler s;
  s.parameter_dim = 1;
  s.sample = [](const Vec& th, Rng& rng) { return Vec::Constant(1, rng.bernoulli(th(0)) ? 1.0 : 0.0).eval(); };
  s.log_density = [](const Vec& x, const Vec& th) { return std::log(x(0) > 0.5 ? th(0) : 1 - th(0)); };
  const MetricEstimate est = fisher_estimate(s, Vec::Constant(1, 0.5), 1000, 1);
  CHECK(est.matrix(0, 0) == doctest::Approx(4.0).epsilon(1e-6));
  const MetricEstimate est3 = fisher_estimate(s, Vec::Constant(1, 0.3), 100000, 1);
  CHECK(est3.matrix(0, 0) == doctest::Approx(1.0 / 0.21).epsilon(0.03));
}

TEST_CASE("coupled coin has a rank-one fisher matrix") {
  const MetricEstimate est = fisher_estimate(coins(true), v2(0.25, 0.25), 5000, 9);
  const double m = est.matrix(0, 0);
  CHECK(m == doctest::Approx(4.0).epsilon(1e-4));
  CHECK(est.matrix(0, 1) == doctest::Approx(m).epsilon(1e-6));
  CHECK(est.matrix(1, 1) == doctest::Approx(m).epsilon(1e-6));
}

TEST_CASE("fisher off-block stays within 3 SE in most seeded trials") {
  int within = 0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const MetricEstimate est = fisher_estimate(coins(false), v2(0.3, 0.6), 400, 1000 + t);
    if (std::abs(est.matrix(0, 1)) <= 3 * est.standard_error(0, 1)) ++within;
  }
  CHECK(within >= 95);
}

TEST_CASE("fisher rejects zero-probability samples") {
  ParametricSampler s = coins(false);
  s.sample = [](const Vec&, Rng&) { return v2(1.0, 1.0); };
  CHECK_THROWS_AS(fisher_estimate(s, v2(0.0, 0.5), 200, 1), NumericalDomainError);
}

TEST_CASE("rng is reproducible and splittable") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(42).split(3), d = Rng(42).split(3), e = Rng(42).split(4);
  CHECK(c.next_u64() == d.next_u64());
  CHECK(c.next_u64() != e.next_u64());
  Rng u(5);
  double mean = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double x = u.uniform();
    CHECK_MESSAGE((x >= 0.0 && x < 1.0), "uniform out of range");
    mean += x;
  }
  CHECK(mean / 100000 == doctest::Approx(0.5).epsilon(0.01));
  for (int i = 0; i < 1000; ++i) CHECK(u.below(7) < 7);
}
