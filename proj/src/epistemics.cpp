#include "mechdiag/epistemics.hpp"

#include <algorithm>
#include <cmath>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

namespace mechdiag {

std::vector<std::string> FiniteProbabilitySpace::issues() const {
  std::vector<std::string> out;
  if (outcomes.empty()) out.push_back("outcomes: empty");
  if (outcomes.size() != probabilities.size()) out.push_back("probabilities: length differs from outcomes");
  std::set<std::string> names;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (!names.insert(outcomes[i]).second) out.push_back("outcomes[" + std::to_string(i) + "]: duplicate");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    if (!(probabilities[i] >= 0) || !std::isfinite(probabilities[i])) {
      out.push_back("probabilities[" + std::to_string(i) + "]: negative or not finite");
    }
    total += probabilities[i];
  }
  if (std::abs(total - 1.0) > 1e-12) out.push_back("probabilities: sum is not 1");
  for (const auto& [name, ev] : events) {
    for (const auto& o : ev) {
      if (!names.count(o)) out.push_back("events." + name + ": unknown outcome " + o);
    }
  }
  return out;
}

double FiniteProbabilitySpace::probability(const std::set<std::string>& event) const {
  double p = 0.0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (event.count(outcomes[i])) p += probabilities[i];
  }
  return p;
}

const std::set<std::string>& FiniteProbabilitySpace::event(const std::string& name) const {
  const auto it = events.find(name);
  if (it == events.end()) throw ValidationError("unknown event: " + name);
  return it->second;
}

PopperMiller popper_miller_decompose(const FiniteProbabilitySpace& space, const std::set<std::string>& h,
                                     const std::set<std::string>& e) {
  const auto issues = space.issues();
  if (!issues.empty()) throw ValidationError("invalid probability space: " + issues.front());
  double p_h = 0, p_e = 0, p_ne = 0, p_he = 0, p_hne = 0;
  for (std::size_t i = 0; i < space.outcomes.size(); ++i) {
    const double p = space.probabilities[i];
    const bool in_h = h.count(space.outcomes[i]) > 0;
    const bool in_e = e.count(space.outcomes[i]) > 0;
    if (in_h) p_h += p;
    if (in_e) p_e += p; else p_ne += p;
    if (in_h && in_e) p_he += p;
    if (in_h && !in_e) p_hne += p;
  }
  if (!(p_e > 0) || !(p_ne > 0)) throw PreconditionError("decomposition needs 0 < P(E) < 1");
  PopperMiller r;
  r.p_h = p_h;
  r.p_e = p_e;
  r.delta = p_he / p_e - p_h;
  r.overlap = p_he * p_ne / p_e;
  r.countersupport = p_hne;
  r.identity_residual = r.delta - (r.overlap - r.countersupport);
  return r;
}

PopperMiller popper_miller_decompose(const FiniteProbabilitySpace& space, const std::string& h,
                                     const std::string& e) {
  return popper_miller_decompose(space, space.event(h), space.event(e));
}

std::vector<std::string> EpisodeLog::issues() const {
  std::vector<std::string> out;
  if (!(cost > 0) || !std::isfinite(cost)) out.push_back("cost: must be positive");
  if (resource_basis.empty()) out.push_back("resource_basis: required");
  for (std::size_t c = 0; c < conjectures.size(); ++c) {
    for (std::size_t t = 0; t < conjectures[c].tests.size(); ++t) {
      const double s = conjectures[c].tests[t].severity;
      if (!(s >= 0 && s <= 1)) {
        out.push_back("conjectures[" + std::to_string(c) + "].tests[" + std::to_string(t) + "].severity: outside [0, 1]");
      }
    }
  }
  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (!(queries[q].weight >= 0) || !std::isfinite(queries[q].weight)) {
      out.push_back("queries[" + std::to_string(q) + "].weight: must be nonnegative");
    }
  }
  for (std::size_t e = 0; e < edits.size(); ++e) {
    if (edits[e].fail < 0) out.push_back("edits[" + std::to_string(e) + "].fail: negative count");
  }
  return out;
}

std::vector<std::string> EpisodeLog::retractions() const {
  std::vector<std::string> out;
  for (const auto& q : queries) {
    if (q.answerable_before && !q.answerable_after) out.push_back(q.id);
  }
  return out;
}

namespace {

void require_log(const EpisodeLog& log) {
  const auto issues = log.issues();
  if (issues.empty()) return;
  std::string msg = "invalid episode log:";
  for (const auto& i : issues) msg += "\n  " + i;
  throw ValidationError(msg);
}

}  // namespace

double ecr(const EpisodeLog& log) {
  require_log(log);
  double total = 0.0;
  for (const auto& c : log.conjectures) {
    if (!c.novel || !c.changes_do_law) continue;
    for (const auto& t : c.tests) {
      if (t.survived) total += t.severity;
    }
  }
  return total / log.cost;
}

double crx(const EpisodeLog& log) {
  require_log(log);
  double total = 0.0;
  for (const auto& q : log.queries) {
    if (q.answerable_after && !q.answerable_before && q.validated) total += q.weight;
  }
  return total / log.cost;
}

double sey(const EpisodeLog& log, double alpha, double beta) {
  require_log(log);
  if (!(alpha > 0) || !(beta > 0)) throw ValidationError("alpha and beta must be positive");
  double total = 0.0;
  for (const auto& e : log.edits) total += alpha * static_cast<double>(e.fail) + (e.hold ? beta : 0.0);
  return total / log.cost;
}

FiniteProbabilitySpace random_probability_space(Rng& rng, std::size_t max_outcomes) {
  if (max_outcomes < 2) throw PreconditionError("a random space needs room for two outcomes");
  FiniteProbabilitySpace s;
  const auto n = 2 + rng.below(max_outcomes - 1);
  double total = 0.0;
  for (std::uint64_t i = 0; i < n; ++i) {
    s.outcomes.push_back("w" + std::to_string(i));
    s.probabilities.push_back(rng.uniform() + 1e-3);
    total += s.probabilities.back();
  }
  // the last cell absorbs the rounding so the sum is 1 to the last bit
  double acc = 0.0;
  for (std::uint64_t i = 0; i + 1 < n; ++i) {
    s.probabilities[i] /= total;
    acc += s.probabilities[i];
  }
  s.probabilities.back() = std::max(0.0, 1.0 - acc);
  return s;
}

EpisodeLog random_episode_log(Rng& rng) {
  EpisodeLog log;
  log.resource_basis = "hours";
  log.cost = rng.uniform(0.1, 10);
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

IdentitySweep popper_miller_sweep(std::size_t spaces, std::uint64_t seed) {
  IdentitySweep out;
  out.spaces = spaces;
  Rng rng(seed);
  for (std::size_t k = 0; k < spaces; ++k) {
    const auto s = random_probability_space(rng);
    std::set<std::string> h, e;
    for (const auto& o : s.outcomes) {
      if (rng.bernoulli(0.5)) h.insert(o);
      if (rng.bernoulli(0.5)) e.insert(o);
    }
    if (!s.issues().empty()) continue;
    const double pe = s.probability(e);
    if (!(pe > 0 && pe < 1) || e.size() == s.outcomes.size()) continue;
    const auto r = popper_miller_decompose(s, h, e);
    out.worst_residual = std::max(out.worst_residual, std::abs(r.delta - (r.overlap - r.countersupport)));
    ++out.checked;
  }
  return out;
}

MetricFuzz metric_fuzz(std::size_t cases, std::uint64_t seed, double alpha, double beta) {
  MetricFuzz out;
  out.cases = cases;
  Rng rng(seed);
  const auto rel = [](double got, double want) {
    return std::abs(got - want) / std::max(1e-300, std::max(std::abs(got), std::abs(want)));
  };
  for (std::size_t k = 0; k < cases; ++k) {
    const EpisodeLog log = random_episode_log(rng);
    const double factor = rng.uniform(0.5, 4);
    EpisodeLog scaled = log;
    scaled.cost = log.cost * factor;
    const double base[3] = {ecr(log), crx(log), sey(log, alpha, beta)};
    const double sc[3] = {ecr(scaled), crx(scaled), sey(scaled, alpha, beta)};
    for (int m = 0; m < 3; ++m) {
      if (base[m] != 0.0 || sc[m] != 0.0) out.homogeneity_error = std::max(out.homogeneity_error, rel(sc[m], base[m] / factor));
      out.negative_values += base[m] < 0;
    }
    EpisodeLog up = log;
    for (auto& c : up.conjectures) {
      for (auto& t : c.tests) t.survived = t.survived || rng.bernoulli(0.5);
    }
    for (auto& q : up.queries) q.validated = q.validated || rng.bernoulli(0.5);
    for (auto& e : up.edits) e.hold = e.hold || rng.bernoulli(0.5);
    out.monotonicity_violations += ecr(up) < base[0];
    out.monotonicity_violations += crx(up) < base[1];
    out.monotonicity_violations += sey(up, alpha, beta) < base[2];
  }
  return out;
}

}  // namespace mechdiag
