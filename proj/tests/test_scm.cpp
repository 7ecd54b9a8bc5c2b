#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"
#include "mechdiag/scm.hpp"

using namespace mechdiag;

namespace {

MechanismSpec coin(const std::string& name, double p) {
  return {name, {}, Primitive::Cpt, {p}, NoiseSpec::uniform(0, 1), 0};
}

MechanismSpec xor_child(const std::string& name, const std::string& parent, double eps) {
  return {name, {parent}, Primitive::XorNoise, {}, NoiseSpec::bernoulli(eps), 0};
}

MechanismSpec affine(const std::string& name, std::vector<std::string> parents,
                     std::vector<double> params, NoiseSpec noise = NoiseSpec::point(0)) {
  return {name, std::move(parents), Primitive::Affine, std::move(params), noise, 0};
}

ParametricScm chain_xyz() {
  return {{coin("X", 0.5), xor_child("Y", "X", 0.1), xor_child("Z", "Y", 0.2)}};
}

// Independent oracle: brute-force sum over the 2^k Bernoulli noise bits of an xor chain.
double chain_oracle(const std::vector<int>& values, double p, const std::vector<double>& eps) {
  double prob = values[0] ? p : 1 - p;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const bool flip = values[i] != values[i - 1];
    prob *= flip ? eps[i - 1] : 1 - eps[i - 1];
  }
  return prob;
}

}  // namespace

TEST_CASE("validate reports structural problems") {
  CHECK(validate(chain_xyz()).ok());

  ParametricScm cyc{{affine("X", {"Y"}, {1, 0}), affine("Y", {"X"}, {1, 0})}};
  CHECK(validate(cyc).has("cycle"));

  ParametricScm shortp{{affine("X", {}, {0}), affine("Y", {"X"}, {1})}};
  CHECK(validate(shortp).has("arity_mismatch"));

  ParametricScm missing{{affine("Y", {"W"}, {1, 0})}};
  CHECK(validate(missing).has("missing_parent"));

  ParametricScm dup{{affine("X", {}, {0}), affine("X", {}, {1})}};
  CHECK(validate(dup).has("duplicate_node"));

  ParametricScm badnoise{{{"X", {}, Primitive::Cpt, {0.5}, NoiseSpec::gaussian(0, 1), 0}}};
  CHECK(validate(badnoise).has("bad_noise"));

  ParametricScm coupled = chain_xyz();
  coupled.noise_coupling = LatentCoupling{"L", {0, 1}, {0.5, 0.5}, {"Y"}};
  CHECK(validate(coupled).has("dependent_noise"));
  coupled.mode = ScmMode::SemiMarkovian;
  CHECK(validate(coupled).ok());
}

TEST_CASE("primitive parameter counts and evaluation") {
  CHECK(primitive_param_count(Primitive::Affine, 2, 0) == 3);
  CHECK(primitive_param_count(Primitive::Cpt, 3, 0) == 8);
  CHECK(primitive_param_count(Primitive::Polynomial, 2, 0) == 7);
  CHECK(primitive_param_count(Primitive::ReluMlp, 2, 3) == 13);
  for (auto p : {Primitive::Affine, Primitive::XorNoise, Primitive::LogisticGate, Primitive::Cpt,
                 Primitive::Polynomial, Primitive::ReluMlp}) {
    CHECK(primitive_from_name(primitive_name(p)) == p);
  }
  CHECK_FALSE(primitive_from_name("softmax").has_value());

  const std::vector<double> pa{2.0};
  MechanismSpec poly{"Y", {"X"}, Primitive::Polynomial, {1, 1, 1, 1}, NoiseSpec::point(0), 0};
  CHECK(apply_mechanism(poly, pa, 0.5, poly.params) == doctest::Approx(1 + 2 + 4 + 8 + 0.5));
  MechanismSpec mlp{"Y", {"X"}, Primitive::ReluMlp, {1, -1, 0, 0, 2, 3, 1}, NoiseSpec::point(0), 2};
  // hidden = relu(2) , relu(-2) ; out = 2*2 + 3*0 + 1
  CHECK(apply_mechanism(mlp, pa, 0.0, mlp.params) == doctest::Approx(5.0));
  MechanismSpec gate{"Y", {"X"}, Primitive::LogisticGate, {1, -2}, NoiseSpec::point(0), 0};
  CHECK(apply_mechanism(gate, pa, 0.0, gate.params) == doctest::Approx(0.5));
}

TEST_CASE("simulate") {
  ParametricScm pm{{affine("X", {}, {1}), affine("Y", {"X"}, {1, 0})}};
  const SampleTable t = simulate(pm, 20, 1);
  CHECK(t.values.rows() == 20);
  CHECK((t.values.array() == 1.0).all());

  ParametricScm c{{coin("X", 0.5)}};
  const SampleTable big = simulate(c, 10000, 123);
  const double mean = big.values.col(0).mean();
  CHECK(mean >= 0.48);
  CHECK(mean <= 0.52);

  const SampleTable a = simulate(chain_xyz(), 500, 9);
  const SampleTable b = simulate(chain_xyz(), 500, 9);
  CHECK(a.values == b.values);

  ParametricScm cyc{{affine("X", {"Y"}, {1, 0}), affine("Y", {"X"}, {1, 0})}};
  CHECK_THROWS_AS(simulate(cyc, 10, 1), ValidationError);
}

TEST_CASE("enumerate_joint examples") {
  ParametricScm xy{{coin("X", 0.5), xor_child("Y", "X", 0.1)}};
  const DistributionTable joint = enumerate_joint(xy);
  CHECK(joint.probability({0, 0}) == doctest::Approx(0.45).epsilon(1e-14));
  CHECK(joint.probability({1, 1}) == doctest::Approx(0.45).epsilon(1e-14));
  CHECK(joint.probability({0, 1}) == doctest::Approx(0.05).epsilon(1e-14));
  CHECK(joint.probability({1, 0}) == doctest::Approx(0.05).epsilon(1e-14));
  CHECK(std::abs(joint.total_mass() - 1.0) <= 1e-12);

  ParametricScm points{{affine("A", {}, {2}), affine("B", {"A"}, {3, 1}), affine("C", {"B"}, {1, -1})}};
  const DistributionTable det = enumerate_joint(points);
  CHECK(det.size() == 1);
  CHECK(det.probability({2, 7, 6}) == 1.0);

  ParametricScm coins{{coin("A", 0.3), coin("B", 0.8)}};
  const DistributionTable prod = enumerate_joint(coins);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      CHECK(prod.probability({double(a), double(b)}) ==
            doctest::Approx((a ? 0.3 : 0.7) * (b ? 0.8 : 0.2)).epsilon(1e-14));
    }
  }
}

TEST_CASE("enumerate_joint agrees with brute-force chain oracle") {
  const std::vector<double> eps{0.1, 0.2};
  const DistributionTable joint = enumerate_joint(chain_xyz());
  for (int code = 0; code < 8; ++code) {
    const std::vector<int> bits{(code >> 2) & 1, (code >> 1) & 1, code & 1};
    const double oracle = chain_oracle(bits, 0.5, eps);
    CHECK(joint.probability({double(bits[0]), double(bits[1]), double(bits[2])}) ==
          doctest::Approx(oracle).epsilon(1e-14));
  }
}

TEST_CASE("enumerate_joint errors") {
  ParametricScm cont{{affine("X", {}, {0}, NoiseSpec::gaussian(0, 1))}};
  CHECK_THROWS_AS(enumerate_joint(cont), UnsupportedModelError);

  ParametricScm many;
  for (int i = 0; i < 21; ++i) many.mechanisms.push_back(coin("C" + std::to_string(i), 0.5));
  CHECK_THROWS_AS(enumerate_joint(many), CapacityError);
  CHECK_THROWS_AS(enumerate_joint(chain_xyz(), 4), CapacityError);
}

TEST_CASE("semi-markovian latent is marginalised") {
  // X = L, Y = L xor Bern(0.1): X and Y correlated with no edge.
  ParametricScm m{{{"X", {}, Primitive::XorNoise, {}, NoiseSpec::point(0), 0},
                   {"Y", {}, Primitive::XorNoise, {}, NoiseSpec::bernoulli(0.1), 0}},
                  ScmMode::SemiMarkovian,
                  LatentCoupling{"L", {0, 1}, {0.5, 0.5}, {"X", "Y"}},
                  {}};
  const DistributionTable joint = enumerate_joint(m);
  CHECK(joint.probability({1, 1}) == doctest::Approx(0.45));
  CHECK(joint.probability({1, 0}) == doctest::Approx(0.05));
  const DistributionTable y = interventional_distribution(m, Intervention::set("X", 1), {"Y"});
  CHECK(y.probability({1}) == doctest::Approx(0.5));
}

TEST_CASE("intervene performs surgery") {
  const ParametricScm chain = chain_xyz();
  const ParametricScm cut = intervene(chain, Intervention::set("Y", 1));
  CHECK(cut.mechanism("Y").parents.empty());
  CHECK(cut.mechanism("X") == chain.mechanism("X"));
  CHECK(cut.mechanism("Z") == chain.mechanism("Z"));

  ParametricScm root_do = intervene(chain, Intervention::set("X", 0));
  CHECK(root_do.mechanism("X").parents.empty());
  CHECK(root_do.mechanism("Y") == chain.mechanism("Y"));

  Intervention cyc;
  cyc.assignments.emplace("X", affine("X", {"Z"}, {1, 0}));
  CHECK_THROWS_AS(intervene(chain, cyc), ValidationError);
  CHECK_THROWS_AS(intervene(chain, Intervention::set("Q", 1)), ValidationError);

  const ParametricScm twice = intervene(cut, Intervention::set("Y", 1));
  CHECK(twice == cut);
}

TEST_CASE("interventional distribution examples") {
  ParametricScm causal{{coin("X", 0.5), xor_child("Y", "X", 0.1)}};
  CHECK(interventional_distribution(causal, Intervention::set("X", 1), {"Y"}).probability({1}) ==
        doctest::Approx(0.9).epsilon(1e-14));
  ParametricScm anti{{coin("Y", 0.5), xor_child("X", "Y", 0.1)}};
  CHECK(interventional_distribution(anti, Intervention::set("X", 1), {"Y"}).probability({1}) ==
        doctest::Approx(0.5).epsilon(1e-14));
  const DistributionTable px = interventional_distribution(causal, Intervention::set("Y", 1), {"X"});
  CHECK(px.total_variation(enumerate_joint(causal).marginal({"X"})) <= 1e-12);
}

TEST_CASE("couplings survive surgery on their source by freezing") {
  ParametricScm m{{coin("X", 0.3), {"Y", {"X"}, Primitive::Cpt, {0.1, 0.2}, NoiseSpec::uniform(0, 1), 0}}};
  m.parameter_couplings.push_back({"Y", 1, "X", 0, 1.0, std::nullopt});
  CHECK(validate(m).ok());
  CHECK_FALSE(parameter_blocks_disjoint(m, "X", "Y"));
  const auto eff = effective_params(m, stored_params(m));
  CHECK(eff[1][1] == doctest::Approx(0.5));

  const ParametricScm cut = intervene(m, Intervention::set("X", 1));
  CHECK(cut.mechanism("Y") == m.mechanism("Y"));
  REQUIRE(cut.parameter_couplings.size() == 1);
  CHECK(cut.parameter_couplings[0].frozen_source_value == doctest::Approx(0.3));
  CHECK(interventional_distribution(m, Intervention::set("X", 1), {"Y"}).probability({1}) ==
        doctest::Approx(0.5));
}

TEST_CASE("monte carlo frequencies converge to the enumerated joint") {
  const ParametricScm chain = chain_xyz();
  const DistributionTable exact = enumerate_joint(chain);
  const std::size_t n = 100000;
  const DistributionTable mc = simulate(chain, n, 77).empirical(chain.nodes());
  double tv = 0.0;
  for (const auto& [a, p] : exact.atoms()) tv += std::abs(p - mc.probability(a));
  tv *= 0.5;
  CHECK(tv <= 3.0 * std::sqrt(8.0 / double(n)));
}

TEST_CASE("non-descendant invariance on random xor chains") {
  for (std::uint64_t trial = 0; trial < 30; ++trial) {
    Rng rng(5, trial);
    ParametricScm m;
    m.mechanisms.push_back(coin("N0", rng.uniform(0.05, 0.95)));
    for (int i = 1; i < 5; ++i) {
      MechanismSpec mech;
      mech.node = "N" + std::to_string(i);
      const int parent = static_cast<int>(rng.below(static_cast<std::uint64_t>(i)));
      mech.parents = {"N" + std::to_string(parent)};
      if (rng.bernoulli(0.5)) {
        mech.primitive = Primitive::XorNoise;
        mech.noise = NoiseSpec::bernoulli(rng.uniform(0, 0.5));
      } else {
        mech.primitive = Primitive::Cpt;
        mech.params = {rng.uniform(0, 1), rng.uniform(0, 1)};
        mech.noise = NoiseSpec::uniform(0, 1);
      }
      m.mechanisms.push_back(mech);
    }
    const std::string target = "N" + std::to_string(rng.below(5));
    const auto desc = descendants(m, target);
    const DistributionTable obs = enumerate_joint(m);
    for (const auto& node : m.nodes()) {
      if (node == target || desc.count(node)) continue;
      const DistributionTable post = interventional_distribution(m, Intervention::set(target, 1), {node});
      CHECK(post.total_variation(obs.marginal({node})) <= 1e-12);
    }
  }
}

TEST_CASE("surgery leaves untargeted mechanisms untouched and is idempotent") {
  const ParametricScm chain = chain_xyz();
  for (const auto& node : chain.nodes()) {
    const ParametricScm once = intervene(chain, Intervention::set(node, 1));
    CHECK(intervene(once, Intervention::set(node, 1)) == once);
    for (const auto& other : chain.nodes()) {
      if (other != node) CHECK(once.mechanism(other) == chain.mechanism(other));
    }
  }
}

TEST_CASE("probe grid stays inside noise supports") {
  ParametricScm m{{affine("X", {}, {0}, NoiseSpec::uniform(-1, 1)), coin("Y", 0.4),
                   xor_child("Z", "Y", 0.3)}};
  for (const auto& p : sample_probe_grid(m, 50, 4)) CHECK_NOTHROW(check_probe_point(m, p));
  ExogenousPoint bad{{2.0, 0.5, 1.0}, 0.0};
  CHECK_THROWS_AS(check_probe_point(m, bad), NumericalDomainError);
}
