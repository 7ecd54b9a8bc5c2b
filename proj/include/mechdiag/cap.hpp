#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mechdiag/terms.hpp"

namespace mechdiag {

struct SortTranslator {
  enum class Kind { Identity, Finite, Affine };
  Kind kind = Kind::Identity;
  std::map<std::string, std::string> table;  // finite carriers
  double slope = 1.0;                         // real carriers: slope * x + offset
  double offset = 0.0;

  static SortTranslator identity() { return {}; }
  static SortTranslator finite(std::map<std::string, std::string> t);
  static SortTranslator affine(double slope, double offset);

  Value apply(const Value& v) const;
};

struct AnalogyMap {
  std::map<std::string, std::string> sort_map;       // A sort -> B sort; identity when absent
  std::map<std::string, SortTranslator> phi;         // per A sort; identity when absent
  std::map<std::string, std::string> correspondence; // F on symbols
  std::optional<std::pair<double, double>> bilipschitz;

  std::string map_sort(const std::string& sort) const;
  Value translate(const std::string& sort, const Value& v) const;
};

// F extended homomorphically; throws CoverageError on an uncovered symbol.
Term map_term(const std::map<std::string, std::string>& correspondence, const Term& t);

// F must preserve arity, sorts and kind; Phi must be injective on finite
// carriers and land in B's carriers; declared bi-Lipschitz bounds are spot-checked.
std::vector<std::string> analogy_issues(const AnalogyMap& analogy, const DomainInterpretation& a,
                                        const DomainInterpretation& b, std::uint64_t seed = 0);

struct LocalityResult {
  std::vector<std::pair<std::string, double>> per_term;  // rendered term, mean squared non-use Jacobian
  double aggregate = 0.0;                                 // max over terms
  bool vacuous = false;
  std::vector<std::string> notices;
};

LocalityResult locality_diagnostic(const std::string& sigma, const std::vector<Term>& terms,
                                   const DomainInterpretation& d, std::size_t n_inputs, std::uint64_t seed);

struct Law {
  std::string name;
  Term left;
  Term right;
  double weight = 1.0;
};

struct LawResidualResult {
  std::vector<double> residuals;         // E_l: mean distance between sides
  double quadratic_total = 0.0;          // sum_l w_l E_l^2
  std::vector<std::string> symbols;      // insensitivity columns
  Mat insensitivity;                     // |dE_l / d theta_s| for s absent from law l, NaN otherwise
  double max_insensitivity = 0.0;
};

LawResidualResult law_residual(const std::vector<Law>& laws, const DomainInterpretation& d,
                               std::size_t n_inputs, std::uint64_t seed);

// Mean over inputs of d(Phi([T]^A(x)), [F(T)]^B(Phi(x))).
double analogy_residual(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                        const DomainInterpretation& b, const InputSet& inputs, std::uint64_t seed = 0);
// Inputs sampled from A's carriers (exhaustively when finite and small).
double analogy_residual(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                        const DomainInterpretation& b, std::size_t n_inputs, std::uint64_t seed);
InputSet analogy_inputs(const Term& t, const DomainInterpretation& a, std::size_t n_inputs, std::uint64_t seed);

struct CompositeResidual {
  std::string term;
  std::size_t depth = 0;
  double measured = 0.0;
  double bound = 0.0;
};

struct GeneralizationResult {
  double max_lipschitz = 0.0;
  std::size_t max_arity = 0;
  double epsilon_sum = 0.0;
  std::map<std::string, double> observed_lipschitz;
  std::vector<std::string> inconsistent_symbols;
  std::vector<CompositeResidual> composites;
  std::size_t violations = 0;
  bool lipschitz_consistent = true;
  bool passed = true;
};

// C(d) = (max_s L_s)^d * k_max^d.
double composite_constant(double max_lipschitz, std::size_t max_arity, std::size_t depth);

// Empirical Lipschitz ratio of one symbol over sampled input pairs in `d`.
double empirical_lipschitz(const std::string& symbol, const DomainInterpretation& d, std::size_t pairs,
                           std::uint64_t seed);

GeneralizationResult generalization_check(double eps_loc, double eps_law, double eps_ana,
                                          const std::map<std::string, double>& lipschitz,
                                          const std::vector<Term>& composites, const AnalogyMap& analogy,
                                          const DomainInterpretation& a, const DomainInterpretation& b,
                                          std::size_t n_inputs, std::uint64_t seed);

// Unbiased MMD^2 with k(x, y) = exp(-|x-y|^2 / (2 h^2)).
double mmd2_unbiased(const std::vector<Vec>& xs, const std::vector<Vec>& ys, double bandwidth);
// Median of nonzero pooled pairwise distances; 1 when all samples coincide.
double median_bandwidth(const std::vector<Vec>& xs, const std::vector<Vec>& ys);

struct StochasticResult {
  double mean = 0.0;
  double standard_error = 0.0;
  std::vector<double> per_input;
};

StochasticResult stochastic_residual(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                                     const DomainInterpretation& b, std::size_t n_inputs, std::size_t n_samples,
                                     std::uint64_t seed);

// Failure modes. Each detector reports whether it fired plus the numbers behind it.
struct SpuriousAnalogyFinding {
  bool fired = false;
  double law_total = 0.0;
  double primitive_residual = 0.0;
};

SpuriousAnalogyFinding detect_spurious_analogy(double law_total, double primitive_residual,
                                               double law_threshold, double residual_threshold);

struct NonUseCouplingFinding {
  bool fired = false;
  std::string symbol;
  double epsilon_loc = 0.0;
};

NonUseCouplingFinding detect_non_use_coupling(const std::map<std::string, LocalityResult>& by_symbol,
                                              double threshold);

struct TrajectorySnapshot {
  ParamMap params_a;  // overrides of A's parameters (empty keeps A's own)
  ParamMap params_b;
  double loss = 0.0;
};

struct DriftFinding {
  bool fired = false;
  std::vector<double> residuals;
  double residual_rise = 0.0;
  double loss_spread = 0.0;
};

DriftFinding detect_drift(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                          const DomainInterpretation& b, const std::vector<TrajectorySnapshot>& trajectory,
                          std::size_t n_inputs, std::uint64_t seed, double rise_threshold, double flat_threshold);

}  // namespace mechdiag
