#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "mechdiag/epistemics.hpp"
#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

using namespace mechdiag;

namespace {

FiniteProbabilitySpace die() {
  FiniteProbabilitySpace s;
  for (int i = 1; i <= 6; ++i) {
    s.outcomes.push_back(std::to_string(i));
    s.probabilities.push_back(1.0 / 6);
  }
  s.probabilities.back() = 1.0 - 5.0 / 6;
  s.events["even"] = {"2", "4", "6"};
  s.events["two"] = {"2"};
  s.events["one_or_four"] = {"1", "4"};
  s.events["one"] = {"1"};
  return s;
}

EpisodeLog base_log(double cost) {
  EpisodeLog log;
  log.resource_basis = "hours";
  log.cost = cost;
  return log;
}

EpisodeLog random_log(Rng& rng) {
  EpisodeLog log = base_log(rng.uniform(0.1, 10));
  const auto nc = rng.below(5);
  for (std::uint64_t c = 0; c < nc; ++c) {
    Conjecture cj;
    cj.id = "c" + std::to_string(c);
    cj.novel = rng.bernoulli(0.7);
    cj.changes_do_law = rng.bernoulli(0.6);
    const auto nt = rng.below(4);
    for (std::uint64_t t = 0; t < nt; ++t) cj.tests.push_back({rng.uniform(), rng.bernoulli(0.5)});
    log.conjectures.push_back(cj);
  }
  const auto nq = rng.below(6);
  for (std::uint64_t q = 0; q < nq; ++q) {
    log.queries.push_back({"q" + std::to_string(q), rng.uniform(0, 3), rng.bernoulli(0.3), rng.bernoulli(0.7),
                           rng.bernoulli(0.5)});
  }
  const auto ne = rng.below(5);
  for (std::uint64_t e = 0; e < ne; ++e) {
    log.edits.push_back({"e" + std::to_string(e), static_cast<long long>(rng.below(6)), rng.bernoulli(0.5)});
  }
  return log;
}

}  // namespace

TEST_CASE("Popper-Miller worked examples") {
  const auto s = die();
  CHECK(s.issues().empty());
  const auto a = popper_miller_decompose(s, "two", "even");
  CHECK(a.delta == doctest::Approx(1.0 / 6).epsilon(1e-14));
  CHECK(a.overlap == doctest::Approx(1.0 / 6).epsilon(1e-14));
  CHECK(a.countersupport == 0.0);
  const auto b = popper_miller_decompose(s, "one_or_four", "even");
  CHECK(std::abs(b.delta) <= 1e-15);
  CHECK(b.overlap == doctest::Approx(1.0 / 6).epsilon(1e-14));
  CHECK(b.countersupport == doctest::Approx(1.0 / 6).epsilon(1e-14));
  const auto c = popper_miller_decompose(s, "one", "even");
  CHECK(c.delta == doctest::Approx(-1.0 / 6).epsilon(1e-14));
  CHECK(c.overlap == 0.0);
  CHECK(c.countersupport == doctest::Approx(1.0 / 6).epsilon(1e-14));
  for (const auto& r : {a, b, c}) CHECK(std::abs(r.identity_residual) <= 1e-15);

  CHECK_THROWS_AS(popper_miller_decompose(s, std::set<std::string>{"1"}, std::set<std::string>{}), PreconditionError);
  CHECK_THROWS_AS(popper_miller_decompose(s, std::set<std::string>{"1"}, std::set<std::string>{"1", "2", "3", "4", "5", "6"}),
                  PreconditionError);
  CHECK_THROWS_AS(popper_miller_decompose(s, "nope", "even"), ValidationError);
  auto bad = s;
  bad.probabilities[0] = 0.5;
  CHECK(!bad.issues().empty());
  CHECK_THROWS_AS(popper_miller_decompose(bad, "one", "even"), ValidationError);
  bad = s;
  bad.events["x"] = {"7"};
  CHECK(!bad.issues().empty());
}

TEST_CASE("Popper-Miller identity and sign properties on random spaces") {
  Rng rng(2024);
  std::size_t checked = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    FiniteProbabilitySpace s;
    const auto n = 2 + rng.below(9);
    double total = 0.0;
    for (std::uint64_t i = 0; i < n; ++i) {
      s.outcomes.push_back("w" + std::to_string(i));
      s.probabilities.push_back(rng.uniform() + 1e-3);
      total += s.probabilities.back();
    }
    // exact renormalization: last cell absorbs the rounding
    double acc = 0.0;
    for (std::uint64_t i = 0; i + 1 < n; ++i) {
      s.probabilities[i] /= total;
      acc += s.probabilities[i];
    }
    s.probabilities.back() = 1.0 - acc;
    if (s.probabilities.back() < 0 || !s.issues().empty()) continue;
    std::set<std::string> h, e;
    for (const auto& o : s.outcomes) {
      if (rng.bernoulli(0.5)) h.insert(o);
      if (rng.bernoulli(0.5)) e.insert(o);
    }
    const double pe = s.probability(e);
    if (!(pe > 0 && pe < 1)) continue;
    const auto r = popper_miller_decompose(s, h, e);
    worst = std::max(worst, std::abs(r.delta - (r.overlap - r.countersupport)));
    ++checked;
    bool disjoint = true, entails = true;
    for (const auto& o : h) disjoint &= !e.count(o);
    for (const auto& o : e) entails &= h.count(o) > 0;
    if (disjoint) CHECK(r.delta <= 1e-15);
    if (entails) {
      CHECK(r.countersupport == doctest::Approx(r.p_h - r.p_e).epsilon(1e-12));
      CHECK(r.delta >= -1e-15);
    }
  }
  CHECK(checked >= 7000);
  CHECK(worst <= 1e-12);
}

TEST_CASE("ECR examples") {
  EpisodeLog log = base_log(3);
  log.conjectures.push_back({"c", true, {{0.5, true}, {1.0, true}}, true});
  CHECK(ecr(log) == 0.5);
  log.conjectures[0].changes_do_law = false;
  CHECK(ecr(log) == 0.0);
  CHECK(ecr(base_log(3)) == 0.0);
  log.conjectures[0].tests[0].severity = 1.5;
  CHECK_THROWS_AS(ecr(log), ValidationError);
  CHECK_THROWS_AS(ecr(base_log(0)), ValidationError);
}

TEST_CASE("CRX examples") {
  EpisodeLog log = base_log(2);
  log.queries = {{"q1", 1, false, true, true}, {"q2", 2, false, true, false}};
  CHECK(crx(log) == 0.5);
  log.queries = {{"q1", 1, true, true, true}};
  CHECK(crx(log) == 0.0);
  CHECK(crx(base_log(2)) == 0.0);
  log.queries = {{"q1", 1, true, false, true}};
  CHECK(log.retractions() == std::vector<std::string>{"q1"});
  log.queries = {{"q1", -1, false, true, true}};
  CHECK_THROWS_AS(crx(log), ValidationError);
}

TEST_CASE("SEY examples") {
  EpisodeLog log = base_log(5);
  log.edits = {{"e", 3, true}};
  CHECK(sey(log, 1, 2) == 1.0);
  log.edits = {{"e1", 0, false}, {"e2", 0, false}};
  CHECK(sey(log, 1, 2) == 0.0);
  log.edits = {{"e", 3, true}};
  log.cost = 10;
  CHECK(sey(log, 1, 2) == 0.5);
  log.edits = {{"e", -1, true}};
  CHECK_THROWS_AS(sey(log, 1, 2), ValidationError);
  log.edits = {{"e", 1, true}};
  CHECK_THROWS_AS(sey(log, 0, 2), ValidationError);
  CHECK_THROWS_AS(sey(log, 1, -2), ValidationError);
}

TEST_CASE("metric homogeneity and monotonicity under fuzzing") {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const EpisodeLog log = random_log(rng);
    const double k = rng.uniform(0.5, 4);
    EpisodeLog scaled = log;
    scaled.cost = log.cost * k;
    CHECK(ecr(scaled) == doctest::Approx(ecr(log) / k).epsilon(1e-12));
    CHECK(crx(scaled) == doctest::Approx(crx(log) / k).epsilon(1e-12));
    CHECK(sey(scaled, 1.5, 0.5) == doctest::Approx(sey(log, 1.5, 0.5) / k).epsilon(1e-12));

    EpisodeLog up = log;
    for (auto& c : up.conjectures) {
      for (auto& t : c.tests) t.survived |= rng.bernoulli(0.5);
    }
    for (auto& q : up.queries) q.validated |= rng.bernoulli(0.5);
    for (auto& e : up.edits) e.hold |= rng.bernoulli(0.5);
    CHECK(ecr(up) >= ecr(log));
    CHECK(crx(up) >= crx(log));
    CHECK(sey(up, 1.5, 0.5) >= sey(log, 1.5, 0.5));
    CHECK(ecr(log) >= 0);
    CHECK(crx(log) >= 0);
    CHECK(sey(log, 1.5, 0.5) >= 0);
  }
}
