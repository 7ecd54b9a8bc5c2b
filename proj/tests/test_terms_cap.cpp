#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mechdiag/cap.hpp"
#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

using namespace mechdiag;

namespace {

SymbolDecl decl(std::string name, std::vector<std::string> in, std::string out, std::string impl,
                std::size_t params) {
  SymbolDecl d;
  d.symbol = name;
  d.inputs = std::move(in);
  d.output = std::move(out);
  d.implementation = std::move(impl);
  d.param_arity = params;
  if (d.output == kBoolSort) d.kind = SymbolKind::Predicate;
  return d;
}

Box box1(double lo, double hi) {
  Box b;
  b.lower = Vec::Constant(1, lo);
  b.upper = Vec::Constant(1, hi);
  return b;
}

DomainInterpretation kinship(const std::string& name, const std::string& rel, std::vector<std::string> people,
                             std::vector<std::pair<std::string, std::string>> edges) {
  DomainInterpretation d;
  d.name = name;
  d.signature.sorts = {"agent"};
  d.signature.symbols[rel] = decl(rel, {"agent", "agent"}, kBoolSort, "relation", 0);
  d.carriers["agent"] = Carrier::of_entities(std::move(people));
  for (const auto& e : edges) d.relations[rel][e] = 1.0;
  return d;
}

DomainInterpretation family() { return kinship("family", "parent", {"a", "b", "c"}, {{"a", "b"}, {"b", "c"}}); }
DomainInterpretation company(bool full = true) {
  std::vector<std::pair<std::string, std::string>> e{{"u", "v"}};
  if (full) e.push_back({"v", "w"});
  return kinship("company", "manager", {"u", "v", "w"}, e);
}

AnalogyMap org_analogy() {
  AnalogyMap m;
  m.phi["agent"] = SortTranslator::finite({{"a", "u"}, {"b", "v"}, {"c", "w"}});
  m.correspondence["parent"] = "manager";
  return m;
}

DomainInterpretation shop(const std::string& name = "dollars") {
  DomainInterpretation d;
  d.name = name;
  d.signature.sorts = {"money", "count", "rate"};
  d.signature.symbols["multiply"] = decl("multiply", {"money", "count"}, "money", "product", 1);
  d.signature.symbols["discount"] = decl("discount", {"money", "rate"}, "money", "discount", 1);
  d.signature.symbols["sum"] = decl("sum", {"money", "money"}, "money", "sum", 1);
  d.carriers["money"] = Carrier::of_box(box1(0, 100));
  d.carriers["count"] = Carrier::of_box(box1(0, 10));
  d.carriers["rate"] = Carrier::of_box(box1(0, 1));
  d.params = {{"multiply", {1.0}}, {"discount", {1.0}}, {"sum", {0.0}}};
  return d;
}

AnalogyMap currency(double offset) {
  AnalogyMap m;
  m.phi["money"] = SortTranslator::affine(0.9, offset);
  for (const char* s : {"multiply", "discount", "sum"}) m.correspondence[s] = s;
  return m;
}

const Term kShopping = parse_term("sum(discount(multiply($0,$1),$2),$3)");

std::vector<Value> reals(std::initializer_list<double> xs) {
  std::vector<Value> out;
  for (double x : xs) out.push_back(Value::of_real(x));
  return out;
}

DomainInterpretation unary_grammar(bool with_binary) {
  DomainInterpretation d;
  d.signature.sorts = {"r"};
  d.signature.symbols["f"] = decl("f", {"r"}, "r", "scale", 1);
  if (with_binary) d.signature.symbols["g"] = decl("g", {"r", "r"}, "r", "sum", 1);
  d.carriers["r"] = Carrier::of_box(box1(-1, 1));
  d.params = {{"f", {2.0}}, {"g", {0.0}}};
  return d;
}

DomainInterpretation coin_domain(double p) {
  DomainInterpretation d;
  d.name = "coin";
  d.signature.sorts = {"r"};
  d.signature.symbols["coin"] = decl("coin", {"r"}, "r", "bernoulli", 2);
  d.carriers["r"] = Carrier::of_box(box1(0, 1));
  d.params = {{"coin", {p, 0.0}}};
  return d;
}

AnalogyMap coin_analogy() {
  AnalogyMap m;
  m.correspondence["coin"] = "coin";
  return m;
}

}  // namespace

TEST_CASE("evaluate: worked examples") {
  const auto fam = family();
  const Term grandparent = parse_term("compose(parent, parent)");
  CHECK(render(grandparent) == "compose(parent, parent)");
  const auto pair = [](const char* x, const char* y) {
    return std::vector<Value>{Value::of_entity(x), Value::of_entity(y)};
  };
  CHECK(evaluate(grandparent, fam, pair("a", "c")).truth == 1.0);
  // relational-join oracle over every pair
  for (const char* x : {"a", "b", "c"}) {
    for (const char* y : {"a", "b", "c"}) {
      bool join = false;
      for (const char* m : {"a", "b", "c"}) join |= fam.relations.at("parent").count({x, m}) && fam.relations.at("parent").count({m, y});
      CHECK(evaluate(grandparent, fam, pair(x, y)).truth == (join ? 1.0 : 0.0));
    }
  }
  const auto dollars = shop();
  CHECK(evaluate(kShopping, dollars, reals({15, 3, 0.2, 5})).real(0) == doctest::Approx(3 * 15 * 0.8 + 5).epsilon(1e-14));
  const Term id = Term::make_slot(0);
  CHECK(evaluate(id, dollars, reals({7.5})).real(0) == 7.5);
  CHECK_THROWS_AS(evaluate(kShopping, dollars, {Value::of_entity("x"), Value::of_real(1.0), Value::of_real(0.1), Value::of_real(1.0)}),
                  TypeMismatchError);
  CHECK_THROWS_AS(infer_sorts(parse_term("discount(multiply($0,$1),$0)"), dollars.signature), TypeMismatchError);
}

TEST_CASE("map_term") {
  const Term gp = parse_term("compose(parent, parent)");
  const Term mapped = map_term(org_analogy().correspondence, gp);
  CHECK(mapped == parse_term("compose(manager,manager)"));
  std::map<std::string, std::string> identity{{"multiply", "multiply"}, {"discount", "discount"}, {"sum", "sum"}};
  CHECK(map_term(identity, kShopping) == kShopping);
  CHECK_THROWS_AS(map_term({{"multiply", "multiply"}}, kShopping), CoverageError);
  // homomorphic extension over composition
  const Term t1 = parse_term("parent");
  CHECK(map_term(org_analogy().correspondence, Term::compose(t1, t1)) ==
        Term::compose(map_term(org_analogy().correspondence, t1), map_term(org_analogy().correspondence, t1)));
  CHECK(analogy_issues(org_analogy(), family(), company()).empty());
}

TEST_CASE("analogy issues") {
  AnalogyMap bad = org_analogy();
  bad.phi["agent"] = SortTranslator::finite({{"a", "u"}, {"b", "u"}, {"c", "w"}});
  const auto issues = analogy_issues(bad, family(), company());
  REQUIRE(!issues.empty());
  CHECK(issues.front().find("injective") != std::string::npos);

  AnalogyMap lip = currency(0.0);
  lip.bilipschitz = std::make_pair(0.8, 1.0);
  CHECK(analogy_issues(lip, shop(), shop("euros")).empty());
  lip.bilipschitz = std::make_pair(0.95, 1.0);
  CHECK(!analogy_issues(lip, shop(), shop("euros")).empty());
}

TEST_CASE("locality diagnostic") {
  auto d = shop();
  const std::vector<Term> terms{parse_term("sum(multiply($0,$1),$2)"), parse_term("multiply($0,$1)")};
  const auto clean = locality_diagnostic("discount", terms, d, 200, 1);
  CHECK(clean.aggregate <= 1e-10);
  CHECK(!clean.vacuous);
  CHECK(clean.per_term.size() == 2);

  d.param_aliases["multiply"] = "discount";
  const auto tied = locality_diagnostic("discount", terms, d, 4000, 1);
  CHECK(tied.aggregate >= 0.01);
  // oracle: d/dtheta (theta x n) = x n, so E[(x n)^2] = E[x^2] E[n^2] = (1e4/3)(100/3)
  CHECK(tied.per_term[1].second == doctest::Approx(1e4 / 3 * 100.0 / 3).epsilon(0.05));

  const auto empty = locality_diagnostic("discount", {}, d, 10, 1);
  CHECK(empty.vacuous);
  CHECK(empty.aggregate == 0.0);
  const auto skipped = locality_diagnostic("discount", {kShopping}, shop(), 10, 1);
  CHECK(skipped.vacuous);
  CHECK(skipped.notices.size() == 2);
  CHECK_THROWS_AS(locality_diagnostic("nope", terms, d, 10, 1), ValidationError);
}

TEST_CASE("locality soundness on random disconnected terms") {
  const auto d = shop();
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    Term t = Term::make_slot(0);
    const int layers = 1 + static_cast<int>(rng.below(3));
    std::size_t next = 1;
    for (int l = 0; l < layers; ++l) {
      t = rng.bernoulli(0.5) ? Term::apply("multiply", {t, Term::make_slot(next++)})
                             : Term::apply("sum", {t, Term::make_slot(next++)});
    }
    const Term term = renumber_slots(t);
    CHECK(locality_diagnostic("discount", {term}, d, 20, trial).aggregate <= 1e-10);
  }
}

TEST_CASE("law residuals") {
  auto d = shop();
  const Law assoc{"assoc", parse_term("sum(sum($0,$1),$2)"), parse_term("sum($0,sum($1,$2))")};
  const auto exact = law_residual({assoc}, d, 500, 3);
  REQUIRE(exact.residuals.size() == 1);
  CHECK(exact.residuals[0] <= 1e-12);
  CHECK(exact.quadratic_total <= 1e-24);
  REQUIRE(exact.symbols.size() == 3);
  // symbols are ordered: discount, multiply, sum
  CHECK(exact.symbols[0] == "discount");
  CHECK(exact.insensitivity(0, 0) <= 1e-10);
  CHECK(std::isnan(exact.insensitivity(0, 2)));

  DomainInterpretation big;
  big.signature.sorts = {"big"};
  big.signature.symbols["fmul"] = decl("fmul", {"big", "big"}, "big", "float_product", 0);
  big.carriers["big"] = Carrier::of_box(box1(1e6, 1e7));
  const Law fassoc{"fassoc", parse_term("fmul(fmul($0,$1),$2)"), parse_term("fmul($0,fmul($1,$2))"), 2.0};
  const auto rounding = law_residual({fassoc}, big, 200, 3);
  CHECK(rounding.residuals[0] > 0);
  CHECK(rounding.quadratic_total == doctest::Approx(2 * rounding.residuals[0] * rounding.residuals[0]));
  // oracle: single-precision rounding of a product near 1e18 to 1e21 errs by at most 2^-24 relative per step
  CHECK(rounding.residuals[0] <= 3 * std::ldexp(1.0, -24) * 1e21);

  const Law bad_weight{"w", parse_term("sum($0,$1)"), parse_term("sum($1,$0)"), 0.0};
  CHECK_THROWS_AS(law_residual({bad_weight}, d, 10, 1), ValidationError);
  const Law ill{"ill", parse_term("multiply($0,$1)"), parse_term("discount($0,$1)")};
  CHECK_THROWS_AS(law_residual({ill}, d, 10, 1), TypeMismatchError);
}

TEST_CASE("analogy residual: family and company") {
  const Term gp = parse_term("compose(parent, parent)");
  CHECK(analogy_residual(gp, org_analogy(), family(), company(), 100, 1) == 0.0);
  const double broken = analogy_residual(gp, org_analogy(), family(), company(false), 100, 1);
  // exhaustive inputs: 9 pairs, only (a,c) disagrees
  CHECK(broken == doctest::Approx(1.0 / 9));
  CHECK(analogy_residual(parse_term("parent"), org_analogy(), family(), company(false), 100, 1) ==
        doctest::Approx(1.0 / 9));
}

TEST_CASE("analogy residual: currency") {
  const auto a = shop("dollars");
  const auto b = shop("euros");
  const InputSet stated_inputs{reals({15, 3, 0.2, 5})};
  CHECK(analogy_residual(kShopping, currency(0.0), a, b, stated_inputs) <= 1e-9);
  const double fee = analogy_residual(kShopping, currency(-0.5), a, b, stated_inputs);
  CHECK(fee >= 1.0);
  CHECK(fee == doctest::Approx(36.4 - 35.2).epsilon(1e-12));
  CHECK(analogy_residual(kShopping, currency(0.0), a, b, 500, 9) <= 1e-9);
}

TEST_CASE("composite generation") {
  const auto chain = generate_composites(unary_grammar(false).signature, default_generators(unary_grammar(false).signature), 3, 100);
  REQUIRE(chain.terms.size() == 3);
  CHECK(render(chain.terms[0]) == "f($0)");
  CHECK(render(chain.terms[1]) == "f(f($0))");
  CHECK(render(chain.terms[2]) == "f(f(f($0)))");
  CHECK(!chain.truncated);

  const auto sig = unary_grammar(true).signature;
  const auto two = generate_composites(sig, default_generators(sig), 2, 1000);
  // hand count: depth 1 {f, g}; depth 2 f over {f, g} = 2, g over {slot, f, g}^2 minus (slot, slot) = 8
  CHECK(two.terms.size() == 12);
  CHECK(!two.truncated);
  std::set<std::string> names;
  for (const auto& t : two.terms) {
    names.insert(render(t));
    CHECK(depth(t) <= 2);
    CHECK_NOTHROW(infer_sorts(t, sig));
  }
  CHECK(names.size() == 12);
  CHECK(names.count("g(f($0), g($1, $2))"));
  CHECK(names.count("f(g($0, $1))"));

  const auto capped = generate_composites(sig, default_generators(sig), 4, 5);
  CHECK(capped.terms.size() == 5);
  CHECK(capped.truncated);
  const auto per_depth = generate_composites(sig, default_generators(sig), 4, 1000, 5);
  CHECK(per_depth.truncated);
  std::map<std::size_t, std::size_t> by_depth;
  for (const auto& t : per_depth.terms) ++by_depth[depth(t)];
  REQUIRE(by_depth.size() == 4);
  CHECK(by_depth[1] == 2);
  for (std::size_t d = 2; d <= 4; ++d) CHECK(by_depth[d] == 5);
  const auto again = generate_composites(sig, default_generators(sig), 2, 1000);
  for (std::size_t i = 0; i < again.terms.size(); ++i) CHECK(again.terms[i] == two.terms[i]);

  const auto rel = generate_composites(family().signature, default_generators(family().signature), 3, 100);
  REQUIRE(rel.terms.size() >= 3);
  CHECK(render(rel.terms[1]) == "compose(parent, parent)");
}

TEST_CASE("generalization bound") {
  const auto fam = family();
  const auto set = generate_composites(fam.signature, default_generators(fam.signature), 4, 200);
  const auto exact = generalization_check(0, 0, 0, {{"parent", 1.0}}, set.terms, org_analogy(), fam, company(), 50, 2);
  CHECK(exact.passed);
  for (const auto& c : exact.composites) {
    CHECK(c.measured == 0.0);
    CHECK(c.bound == 0.0);
  }

  const auto a = shop("dollars");
  const auto b = shop("euros");
  const AnalogyMap fee = currency(-0.5);
  double eps_ana = 0;
  for (const auto& g : default_generators(a.signature)) eps_ana = std::max(eps_ana, analogy_residual(g, fee, a, b, 200, 4));
  CHECK(eps_ana > 0);
  const std::map<std::string, double> lips{{"multiply", 101}, {"discount", 101}, {"sum", 1.5}};
  const auto two = generate_composites(a.signature, default_generators(a.signature), 2, 500);
  const auto fee_check = generalization_check(0, 0, eps_ana, lips, two.terms, fee, a, b, 100, 4);
  CHECK(fee_check.lipschitz_consistent);
  CHECK(fee_check.violations == 0);
  CHECK(fee_check.passed);
  CHECK(fee_check.max_arity == 2);
  CHECK(fee_check.composites.front().bound == doctest::Approx(composite_constant(101, 2, 1) * eps_ana));

  auto wrong = lips;
  wrong["multiply"] = 0.5;
  const auto liar = generalization_check(0, 0, eps_ana, wrong, two.terms, fee, a, b, 100, 4);
  CHECK(!liar.passed);
  REQUIRE(liar.inconsistent_symbols.size() == 1);
  CHECK(liar.inconsistent_symbols[0] == "multiply");

  CHECK_THROWS_AS(generalization_check(0, 0, 0, {}, set.terms, org_analogy(), fam, company(), 10, 2), ValidationError);
  CHECK(composite_constant(2, 3, 2) == 36.0);
}

TEST_CASE("empirical Lipschitz matches gradient bound") {
  const auto d = unary_grammar(true);
  CHECK(empirical_lipschitz("f", d, 1000, 1) == doctest::Approx(2.0));
  const double g = empirical_lipschitz("g", d, 1000, 1);
  CHECK(g <= std::sqrt(2.0) + 1e-12);
  CHECK(g >= 1.3);
}

TEST_CASE("mmd estimator") {
  std::vector<Vec> xs, ys;
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    xs.push_back(Vec::Constant(1, rng.normal()));
    ys.push_back(Vec::Constant(1, rng.normal() + 3));
  }
  const double h = median_bandwidth(xs, ys);
  CHECK(h > 0);
  CHECK(mmd2_unbiased(xs, ys, h) > 0.3);
  CHECK(std::abs(mmd2_unbiased(xs, xs, h)) < 1e-12 + mmd2_unbiased(xs, ys, h));
  CHECK_THROWS_AS(mmd2_unbiased({xs[0]}, ys, h), PreconditionError);
  CHECK(median_bandwidth({xs[0], xs[0]}, {xs[0]}) == 1.0);
}

TEST_CASE("stochastic residual") {
  const Term t = parse_term("coin($0)");
  // equal laws: the estimate sits within 2 SE of 0 for most seeds
  int within = 0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto same = stochastic_residual(t, coin_analogy(), coin_domain(0.2), coin_domain(0.2), 50, 100, seed);
    within += std::abs(same.mean) <= 2 * same.standard_error;
  }
  CHECK(within >= 34);
  const auto diff = stochastic_residual(t, coin_analogy(), coin_domain(0.2), coin_domain(0.8), 100, 100, 11);
  CHECK(diff.mean > 5 * diff.standard_error);
  // oracle: h = 1 on {0, 1}, MMD^2 = 2 (1 - e^{-1/2}) (p - q)^2
  CHECK(diff.mean == doctest::Approx(2 * (1 - std::exp(-0.5)) * 0.36).epsilon(0.1));
  const auto doubled = stochastic_residual(t, coin_analogy(), coin_domain(0.2), coin_domain(0.8), 100, 200, 11);
  const double ratio = diff.standard_error / doubled.standard_error;
  CHECK(ratio == doctest::Approx(std::sqrt(2.0)).epsilon(0.25));
  CHECK_THROWS_AS(stochastic_residual(t, coin_analogy(), coin_domain(0.2), coin_domain(0.8), 10, 49, 1), PreconditionError);
  CHECK_THROWS_AS(stochastic_residual(parse_term("parent"), org_analogy(), family(), company(), 10, 60, 1),
                  PreconditionError);
}

TEST_CASE("failure-mode detectors") {
  CHECK(detect_spurious_analogy(0.5, 0.0, 0.1, 1e-9).fired);
  CHECK(!detect_spurious_analogy(0.01, 0.0, 0.1, 1e-9).fired);
  CHECK(!detect_spurious_analogy(0.5, 0.3, 0.1, 1e-9).fired);

  auto d = shop();
  const std::vector<Term> terms{parse_term("sum(multiply($0,$1),$2)")};
  std::map<std::string, LocalityResult> clean{{"discount", locality_diagnostic("discount", terms, d, 50, 1)}};
  CHECK(!detect_non_use_coupling(clean, 1e-6).fired);
  d.param_aliases["multiply"] = "discount";
  std::map<std::string, LocalityResult> tied{{"discount", locality_diagnostic("discount", terms, d, 50, 1)}};
  const auto finding = detect_non_use_coupling(tied, 1e-6);
  CHECK(finding.fired);
  CHECK(finding.symbol == "discount");

  std::vector<TrajectorySnapshot> traj;
  for (int k = 0; k < 4; ++k) traj.push_back({{}, {{"sum", {0.25 * k}}}, 0.1 + 1e-4 * k});
  const auto drift = detect_drift(kShopping, currency(0.0), shop(), shop("euros"), traj, 50, 3, 0.5, 0.01);
  CHECK(drift.fired);
  REQUIRE(drift.residuals.size() == 4);
  CHECK(drift.residuals[0] <= 1e-9);
  CHECK(drift.residual_rise == doctest::Approx(0.75));
  for (std::size_t i = 1; i < drift.residuals.size(); ++i) CHECK(drift.residuals[i] > drift.residuals[i - 1]);
  traj.back().loss = 5.0;
  CHECK(!detect_drift(kShopping, currency(0.0), shop(), shop("euros"), traj, 50, 3, 0.5, 0.01).fired);
}
