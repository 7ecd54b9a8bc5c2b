#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mechdiag/calculus.hpp"
#include "mechdiag/distribution.hpp"

namespace mechdiag {

enum class NoiseKind { Bernoulli, Uniform, Gaussian, PointMass };

// Exogenous noise U_i. Field meaning depends on kind:
//   bernoulli: a = p;  uniform: [a, b];  gaussian: mean a, stddev b;  point mass: a.
struct NoiseSpec {
  NoiseKind kind = NoiseKind::PointMass;
  double a = 0.0;
  double b = 0.0;

  static NoiseSpec bernoulli(double p) { return {NoiseKind::Bernoulli, p, 0.0}; }
  static NoiseSpec uniform(double lo, double hi) { return {NoiseKind::Uniform, lo, hi}; }
  static NoiseSpec gaussian(double mean, double sd) { return {NoiseKind::Gaussian, mean, sd}; }
  static NoiseSpec point(double value) { return {NoiseKind::PointMass, value, 0.0}; }

  bool finite_support() const { return kind == NoiseKind::Bernoulli || kind == NoiseKind::PointMass; }
  bool contains(double u) const;

  bool operator==(const NoiseSpec&) const = default;
};

// Parametric primitive library. Parameter layouts (k = number of parents):
//   affine          [w_1..w_k, b]                    x = w.pa + b + u
//   xor-noise       []                               x = (sum pa + u) mod 2 on {0,1}
//   logistic-gate   [w_1..w_k, b]                    x = sigmoid(w.pa + b) + u
//   cpt             2^k row probabilities            x = 1{u < q_row}, u ~ uniform(0,1)
//   polynomial      [c0, (a1,a2,a3) per parent]      x = c0 + sum a_d pa^d + u
//   relu-mlp        [W1 (h x k), b1 (h), w2 (h), b2] x = w2.relu(W1 pa + b1) + b2 + u
enum class Primitive { Affine, XorNoise, LogisticGate, Cpt, Polynomial, ReluMlp };

enum class MechanismCategory { Table, LinearNoise, LibraryPrimitive };

std::string primitive_name(Primitive p);
std::optional<Primitive> primitive_from_name(std::string_view name);
std::size_t primitive_param_count(Primitive p, std::size_t parent_count, std::size_t hidden_width);
MechanismCategory mechanism_category(Primitive p);

struct MechanismSpec {
  std::string node;
  std::vector<std::string> parents;
  Primitive primitive = Primitive::Affine;
  std::vector<double> params;
  NoiseSpec noise;
  std::size_t hidden_width = 0;  // relu-mlp only

  bool operator==(const MechanismSpec&) const = default;
};

double apply_mechanism(const MechanismSpec& mechanism, std::span<const double> parent_values,
                       double noise, std::span<const double> params);

// Effective theta_node[index] = stored + gain * theta_source[source_index].
// A coupling whose source mechanism was replaced by surgery keeps the source
// value it saw at surgery time.
struct ParameterCoupling {
  std::string node;
  std::size_t index = 0;
  std::string source;
  std::size_t source_index = 0;
  double gain = 1.0;
  std::optional<double> frozen_source_value;

  bool operator==(const ParameterCoupling&) const = default;
};

// Semi-markovian dependence: a shared discrete latent whose value is added to
// the noise slot of every member node.
struct LatentCoupling {
  std::string name;
  std::vector<double> values;
  std::vector<double> probabilities;
  std::vector<std::string> members;

  bool operator==(const LatentCoupling&) const = default;
};

enum class ScmMode { Markovian, SemiMarkovian };

struct ParametricScm {
  std::vector<MechanismSpec> mechanisms;  // declaration order defines node order
  ScmMode mode = ScmMode::Markovian;
  std::optional<LatentCoupling> noise_coupling;
  std::vector<ParameterCoupling> parameter_couplings;

  std::vector<std::string> nodes() const;
  std::optional<std::size_t> index_of(std::string_view node) const;
  std::size_t require_index(std::string_view node) const;
  const MechanismSpec& mechanism(std::string_view node) const;

  bool operator==(const ParametricScm&) const = default;
};

struct Violation {
  std::string code;  // cycle, missing_parent, arity_mismatch, ...
  std::string node;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
  bool has(std::string_view code) const;
};

ValidationReport validate(const ParametricScm& scm);
// Throws ValidationError listing every violation.
void require_valid(const ParametricScm& scm);

std::vector<std::size_t> topological_order(const ParametricScm& scm);
// Strict descendants of `node`.
std::set<std::string> descendants(const ParametricScm& scm, std::string_view node);
bool is_descendant(const ParametricScm& scm, std::string_view source, std::string_view target);
// True when no parameter coupling links the two nodes in either direction.
bool parameter_blocks_disjoint(const ParametricScm& scm, std::string_view a, std::string_view b);

// One value per node noise (declaration order) plus the shared latent, if any.
struct ExogenousPoint {
  std::vector<double> noise;
  double latent = 0.0;
};

using ParamBlocks = std::vector<std::vector<double>>;

ParamBlocks stored_params(const ParametricScm& scm);
ParamBlocks effective_params(const ParametricScm& scm, const ParamBlocks& stored);

struct ForcedValue {
  std::size_t node = 0;
  double value = 0.0;
};

// Evaluates every structural assignment in topological order.
std::vector<double> solve(const ParametricScm& scm, const ExogenousPoint& exogenous,
                          const ParamBlocks& effective,
                          std::optional<ForcedValue> forced = std::nullopt);

struct SampleTable {
  std::vector<std::string> columns;
  Mat values;  // rows = samples

  DistributionTable empirical(const std::vector<std::string>& query) const;
};

SampleTable simulate(const ParametricScm& scm, std::size_t n, std::uint64_t seed);

struct Intervention {
  std::map<std::string, std::variant<double, MechanismSpec>> assignments;

  static Intervention set(std::string node, double value);
};

ParametricScm intervene(const ParametricScm& scm, const Intervention& iv);

inline constexpr std::size_t kMaxJointAssignments = 1'000'000;

DistributionTable enumerate_joint(const ParametricScm& scm,
                                  std::size_t max_cells = kMaxJointAssignments);
DistributionTable interventional_distribution(const ParametricScm& scm, const Intervention& iv,
                                              const std::vector<std::string>& query);

// Draws probe points from the declared noise laws; every coordinate lies in its
// noise support.
std::vector<ExogenousPoint> sample_probe_grid(const ParametricScm& scm, std::size_t count,
                                              std::uint64_t seed);
void check_probe_point(const ParametricScm& scm, const ExogenousPoint& point);

}  // namespace mechdiag
