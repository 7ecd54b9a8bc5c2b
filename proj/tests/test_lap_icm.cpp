#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mechdiag/errors.hpp"
#include "mechdiag/lap_icm.hpp"
#include "mechdiag/rng.hpp"

using namespace mechdiag;

namespace {

MechanismSpec affine(const std::string& name, std::vector<std::string> parents, std::vector<double> params,
                     NoiseSpec noise = NoiseSpec::uniform(-1, 1)) {
  return {name, std::move(parents), Primitive::Affine, std::move(params), noise, 0};
}

MechanismSpec coin(const std::string& name, std::vector<std::string> parents, std::vector<double> rows) {
  return {name, std::move(parents), Primitive::Cpt, std::move(rows), NoiseSpec::uniform(0, 1), 0};
}

ParametricScm linear_chain() {
  return {{affine("X", {}, {0.3}), affine("Y", {"X"}, {2.0, 0.1}), affine("Z", {"Y"}, {-1.5, 0.0})}};
}

ParametricScm fork_model() {
  return {{affine("C", {}, {0.0}), affine("X", {"C"}, {1.0, 0.0}), affine("Y", {"C"}, {0.5, 0.0})}};
}

std::vector<ExogenousPoint> grid(const ParametricScm& m, std::size_t n = 32) {
  return sample_probe_grid(m, n, 17);
}

}  // namespace

TEST_CASE("locality witness examples") {
  const ParametricScm chain = linear_chain();
  CHECK(locality_residual(chain, "Z", "X", grid(chain)) <= 1e-8);
  const ParametricScm f = fork_model();
  CHECK(locality_residual(f, "X", "Y", grid(f)) <= 1e-8);

  ParametricScm doubling{{affine("X", {}, {0.0}), affine("Y", {"X"}, {2.0, 0.0}, NoiseSpec::point(0))}};
  const LapReport r = lap_witness(doubling, "X", "Y", grid(doubling));
  CHECK(r.descendant);
  CHECK(r.passed);
  CHECK(r.locality_residual == doctest::Approx(2.0).epsilon(1e-8));
  // Chain rule through two edges.
  CHECK(locality_residual(chain, "X", "Z", grid(chain)) == doctest::Approx(3.0).epsilon(1e-8));

  CHECK_THROWS_AS(locality_residual(chain, "Q", "X", grid(chain)), ValidationError);
  CHECK_THROWS_AS(locality_residual(chain, "X", "X", grid(chain)), ValidationError);
}

TEST_CASE("autonomy witness examples") {
  const ParametricScm chain = linear_chain();
  CHECK(autonomy_residual(chain, "X", "Y", grid(chain)) <= 1e-8);

  // theta_Y's bias is tied to theta_X with gain 1.
  ParametricScm tied = chain;
  tied.parameter_couplings.push_back({"Y", 1, "X", 0, 1.0, std::nullopt});
  const double tied_res = autonomy_residual(tied, "X", "Y", grid(tied));
  CHECK(tied_res > 0.1);
  CHECK(tied_res == doctest::Approx(1.0).epsilon(1e-8));
  const LapReport rev = lap_witness(tied, "Z", "Y", grid(tied));
  CHECK(rev.passed);

  ParametricScm xor_model{{{"X", {}, Primitive::XorNoise, {}, NoiseSpec::bernoulli(0.5), 0},
                           affine("Y", {}, {1.0})}};
  CHECK(autonomy_residual(xor_model, "X", "Y", grid(xor_model)) == 0.0);
}

TEST_CASE("lap sweep flags only genuine leaks") {
  ParametricScm m{{affine("A", {}, {0.2}), affine("B", {"A"}, {1.3, 0.0}), affine("C", {}, {0.4}),
                   affine("D", {"C"}, {0.7, 0.1})}};
  m.parameter_couplings.push_back({"D", 1, "A", 0, 0.5, std::nullopt});
  for (const auto& r : lap_sweep(m, grid(m))) {
    const bool leak = r.source == "A" && r.target == "D";
    if (r.descendant) continue;
    if (leak) {
      CHECK(r.autonomy_residual == doctest::Approx(0.5).epsilon(1e-8));
      CHECK_FALSE(r.passed);
    } else {
      CHECK(r.locality_residual <= 1e-6);
      CHECK(r.autonomy_residual <= 1e-6);
      CHECK(r.passed);
    }
  }
}

TEST_CASE("icm witness on independent and coupled coins") {
  ParametricScm indep{{coin("X", {}, {0.5}), coin("Y", {"X"}, {0.5, 0.5})}};
  IcmOptions opts;
  opts.samples = 100000;
  opts.seed = 3;
  const IcmReport ri = icm_witness(indep, "Y", grid(indep), opts);
  CHECK(ri.parent_dim == 1);
  CHECK(ri.child_dim == 2);
  CHECK(ri.offblock_ratio <= 0.05);
  CHECK(ri.structural_residual <= 1e-8);
  CHECK(ri.bracket_witness <= 1e-8);
  // Closed form: F_XX = 4, F_{Y_r Y_r} = P(X=r) * 4 = 2.
  CHECK(ri.metric.matrix(0, 0) == doctest::Approx(4.0).epsilon(0.02));
  CHECK(ri.metric.matrix(1, 1) == doctest::Approx(2.0).epsilon(0.03));

  ParametricScm coupled{{coin("X", {}, {0.5}), coin("Y", {"X"}, {0.0, 0.0})}};
  coupled.parameter_couplings.push_back({"Y", 0, "X", 0, 1.0, std::nullopt});
  coupled.parameter_couplings.push_back({"Y", 1, "X", 0, 1.0, std::nullopt});
  const IcmReport rc = icm_witness(coupled, "Y", grid(coupled), opts);
  CHECK(rc.offblock_ratio >= 0.4);
  CHECK(rc.structural_residual == doctest::Approx(1.0).epsilon(1e-8));

  // Closed-form oracle for the coupled Fisher matrix at theta_X = 0.5:
  // score_X = s_x + s_y, score_Yr = 1{X=r} s_y, E[s_x^2] = E[s_y^2] = 4.
  Mat oracle(3, 3);
  oracle << 8, 2, 2, 2, 2, 0, 2, 0, 2;
  CHECK(offblock_ratio(oracle, 1) == doctest::Approx(rc.offblock_ratio).epsilon(0.05));

  CHECK_THROWS_AS(icm_witness(coupled, "X", grid(coupled), opts), ValidationError);
}

TEST_CASE("icm witness under a reparametrisation") {
  ParametricScm indep{{coin("X", {}, {0.5}), coin("Y", {"X"}, {0.5, 0.5})}};
  IcmOptions opts;
  opts.samples = 20000;
  opts.seed = 5;
  // A shear chart mixes parent and child coordinates; off-block mass appears.
  opts.chart = [](const Vec& xi) {
    Vec th(3);
    th << xi(0), xi(1) + xi(0), xi(2) + xi(0);
    return th;
  };
  opts.chart_point = Vec::Zero(3);
  opts.chart_point << 0.5, 0.0, 0.0;
  const IcmReport r = icm_witness(indep, "Y", grid(indep), opts);
  CHECK(r.offblock_ratio > 0.2);

  // Non-commuting user fields on the parameter space.
  IcmOptions f;
  f.compute_metric = false;
  f.parent_fields = {VectorField{3, [](const Vec&) { return Vec(Vec::Unit(3, 0)); }, {}}};
  f.child_fields = {VectorField{3, [](const Vec& p) { Vec v = Vec::Zero(3); v(1) = p(0); return v; }, {}}};
  CHECK(icm_witness(indep, "Y", grid(indep), f).bracket_witness == doctest::Approx(1.0).epsilon(1e-8));
}

TEST_CASE("offblock ratio bounds") {
  CHECK(offblock_ratio(Mat::Identity(4, 4), 2) == 0.0);
  CHECK(offblock_ratio(Mat::Ones(4, 4), 2) == doctest::Approx(std::sqrt(0.5)));
  CHECK(offblock_ratio(Mat::Zero(3, 3), 1) == 0.0);
}

TEST_CASE("observational equivalence demo") {
  const auto r = obs_equivalence_demo();
  CHECK(r.max_joint_tv <= 1e-12);
  for (const auto& j : r.joints) {
    CHECK(j.probability({0, 0}) == doctest::Approx(0.45).epsilon(1e-14));
    CHECK(j.probability({0, 1}) == doctest::Approx(0.05).epsilon(1e-14));
  }
  CHECK(r.do_answers[0] == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(r.do_answers[1] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(r.do_answers[2] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(r.report.passed());
  CHECK_FALSE(r.degenerate);

  const auto flat = obs_equivalence_demo({0.5, 0.5, 1.0, 0.1});
  for (double a : flat.do_answers) CHECK(a == doctest::Approx(0.5));
  CHECK(flat.degenerate);
  CHECK_FALSE(flat.report.passed());

  const auto clean = obs_equivalence_demo({0.0, 0.5, 1.0, 0.1});
  CHECK(clean.do_answers[0] == 1.0);
  CHECK(clean.do_answers[1] == doctest::Approx(0.5));
  CHECK(clean.do_answers[2] == doctest::Approx(0.5));
  CHECK(clean.max_joint_tv <= 1e-12);
}

TEST_CASE("observational equivalence holds across random configurations") {
  for (std::uint64_t t = 0; t < 200; ++t) {
    Rng rng(99, t);
    const auto r = obs_equivalence_demo({rng.uniform(), rng.uniform(), 1.0, 0.1});
    CHECK(r.max_joint_tv <= 1e-12);
  }
}

namespace {

std::vector<Observation> coin_data(int agree, int disagree) {
  std::vector<Observation> d;
  for (int k = 0; k < agree; ++k) d.push_back({k % 2, k % 2});
  for (int k = 0; k < disagree; ++k) d.push_back({k % 2, 1 - k % 2});
  return d;
}

}  // namespace

TEST_CASE("bayes surgery demo") {
  const std::vector<CoinHypothesis> hs{{"h1", 0.5, 0.1}, {"h2", 0.5, 0.3}};
  const std::vector<double> prior{0.5, 0.5};
  const auto r = bayes_surgery_demo(hs, prior, SurgeryFamily::CutParent, SurgeryFamily::CutChild,
                                    coin_data(45, 5), {1.0, 0.35});
  CHECK(r.max_posterior_diff <= 1e-12);
  // Oracle: odds h1:h2 = (0.9/0.7)^45 (0.1/0.3)^5.
  const double odds = std::pow(0.9 / 0.7, 45) * std::pow(1.0 / 3.0, 5);
  CHECK(r.posterior_a[0] == doctest::Approx(odds / (1 + odds)).epsilon(1e-12));
  CHECK(r.do_answer_b == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(r.do_answer_a == doctest::Approx((0.9 * odds + 0.7) / (1 + odds)).epsilon(1e-12));
  CHECK(r.gap == doctest::Approx(0.4).epsilon(0.01));
  CHECK(r.report.passed());

  const auto empty = bayes_surgery_demo(hs, prior, SurgeryFamily::CutParent, SurgeryFamily::Confounded, {});
  CHECK(empty.posterior_a[0] == doctest::Approx(0.5));
  CHECK(empty.posterior_b[1] == doctest::Approx(0.5));

  const auto same = bayes_surgery_demo(hs, prior, SurgeryFamily::CutParent, SurgeryFamily::CutParent,
                                       coin_data(10, 2));
  CHECK(same.gap == 0.0);
  CHECK(same.uninformative);
  CHECK_FALSE(same.report.passed());
}

TEST_CASE("posterior equality for random data sequences up to length 200") {
  const std::vector<CoinHypothesis> hs{{"a", 0.3, 0.1}, {"b", 0.6, 0.25}, {"c", 0.5, 0.45}};
  const std::vector<double> prior{0.2, 0.5, 0.3};
  for (std::uint64_t t = 0; t < 40; ++t) {
    Rng rng(321, t);
    std::vector<Observation> d;
    const auto len = rng.below(201);
    for (std::uint64_t k = 0; k < len; ++k) d.push_back({int(rng.below(2)), int(rng.below(2))});
    const auto r = bayes_surgery_demo(hs, prior, SurgeryFamily::CutParent, SurgeryFamily::CutChild, d);
    CHECK(r.max_posterior_diff <= 1e-12);
    const auto c = bayes_surgery_demo(hs, prior, SurgeryFamily::CutChild, SurgeryFamily::Confounded, d);
    CHECK(c.max_posterior_diff <= 1e-12);
  }
}

TEST_CASE("bayes surgery rejects bad inputs") {
  const std::vector<CoinHypothesis> hs{{"h", 0.5, 0.1}};
  CHECK_THROWS_AS(bayes_surgery_demo(hs, {0.4, 0.6}, SurgeryFamily::CutParent, SurgeryFamily::CutChild, {}),
                  ValidationError);
  CHECK_THROWS_AS(bayes_surgery_demo(hs, {1.0}, SurgeryFamily::CutParent, SurgeryFamily::CutChild, {{2, 0}}),
                  ValidationError);
  const std::vector<CoinHypothesis> sure{{"h", 1.0, 0.0}};
  CHECK_THROWS_AS(bayes_surgery_demo(sure, {1.0}, SurgeryFamily::CutParent, SurgeryFamily::CutChild, {{0, 0}}),
                  PreconditionError);
}
