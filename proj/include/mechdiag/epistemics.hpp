#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace mechdiag {

struct FiniteProbabilitySpace {
  std::vector<std::string> outcomes;
  std::vector<double> probabilities;
  std::map<std::string, std::set<std::string>> events;

  // Empty when probabilities are nonnegative, sum to 1 within 1e-12 and events name known outcomes.
  std::vector<std::string> issues() const;
  double probability(const std::set<std::string>& event) const;
  const std::set<std::string>& event(const std::string& name) const;
};

struct PopperMiller {
  double p_h = 0.0;
  double p_e = 0.0;
  double delta = 0.0;           // P(H|E) - P(H)
  double overlap = 0.0;         // P(H and E) P(not E) / P(E)
  double countersupport = 0.0;  // P(H and not E)
  double identity_residual = 0.0;
};

// Requires 0 < P(E) < 1.
PopperMiller popper_miller_decompose(const FiniteProbabilitySpace& space, const std::set<std::string>& h,
                                     const std::set<std::string>& e);
PopperMiller popper_miller_decompose(const FiniteProbabilitySpace& space, const std::string& h,
                                     const std::string& e);

struct SeverityTest {
  double severity = 0.0;
  bool survived = false;
};

struct Conjecture {
  std::string id;
  bool novel = false;  // asserted; deductive closure is not computed
  std::vector<SeverityTest> tests;
  bool changes_do_law = false;
};

struct Query {
  std::string id;
  double weight = 0.0;
  bool answerable_before = false;
  bool answerable_after = false;
  bool validated = false;
};

struct Edit {
  std::string id;
  long long fail = 0;
  bool hold = false;
};

struct EpisodeLog {
  std::string resource_basis;
  double cost = 0.0;
  std::vector<Conjecture> conjectures;
  std::vector<Query> queries;
  std::vector<Edit> edits;

  // Field-path messages; empty when the log can be scored.
  std::vector<std::string> issues() const;
  // Queries answerable before but not after.
  std::vector<std::string> retractions() const;
};

double ecr(const EpisodeLog& log);
double crx(const EpisodeLog& log);
double sey(const EpisodeLog& log, double alpha, double beta);

class Rng;

// Random space with 2..max_outcomes outcomes, all probabilities positive.
FiniteProbabilitySpace random_probability_space(Rng& rng, std::size_t max_outcomes = 10);
EpisodeLog random_episode_log(Rng& rng);

struct IdentitySweep {
  std::size_t spaces = 0;
  std::size_t checked = 0;  // draws with 0 < P(E) < 1
  double worst_residual = 0.0;
};

// Random (space, H, E) draws; H and E include each outcome with probability 1/2.
IdentitySweep popper_miller_sweep(std::size_t spaces, std::uint64_t seed);

struct MetricFuzz {
  std::size_t cases = 0;
  double homogeneity_error = 0.0;  // max relative error of metric(k cost) = metric / k
  std::size_t monotonicity_violations = 0;
  std::size_t negative_values = 0;
};

// Scales cost and upgrades outcomes (tests survive, queries validate, edits hold)
// on random logs.
MetricFuzz metric_fuzz(std::size_t cases, std::uint64_t seed, double alpha, double beta);

}  // namespace mechdiag
