#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mechdiag/calculus.hpp"
#include "mechdiag/report.hpp"
#include "mechdiag/scm.hpp"

namespace mechdiag {

inline constexpr double kStructuralZeroTol = 1e-6;
inline constexpr double kOffblockTol = 0.05;

struct LapReport {
  std::string source;
  std::string target;
  double locality_residual = 0.0;
  double autonomy_residual = 0.0;
  bool descendant = false;
  bool passed = true;
};

// sup over the grid of |d X_target / ds| under do(X_source = x_source(u) + s),
// same exogenous draw u, parameters fixed.
double locality_residual(const ParametricScm& scm, const std::string& source,
                         const std::string& target, const std::vector<ExogenousPoint>& grid,
                         const DiffScheme& scheme = {});

// sup over the grid of ||d M_target / d theta_source|| with all states held at
// their unperturbed values. For cpt mechanisms M is the row success
// probability; otherwise it is the structural map at the drawn noise.
double autonomy_residual(const ParametricScm& scm, const std::string& source,
                         const std::string& target, const std::vector<ExogenousPoint>& grid,
                         const DiffScheme& scheme = {});

LapReport lap_witness(const ParametricScm& scm, const std::string& source, const std::string& target,
                      const std::vector<ExogenousPoint>& grid, double tolerance = kStructuralZeroTol);

// Every ordered pair of distinct nodes, in declaration order.
std::vector<LapReport> lap_sweep(const ParametricScm& scm, const std::vector<ExogenousPoint>& grid,
                                 double tolerance = kStructuralZeroTol);

// Location of one scalar parameter: mechanisms[node].params[index].
struct ParamRef {
  std::string node;
  std::size_t index = 0;
};

// Metric over the listed parameter coordinates, evaluated at the stored values.
using MetricSource = std::function<MetricEstimate(const ParametricScm&, const std::vector<ParamRef>&,
                                                  std::size_t samples, std::uint64_t seed)>;

// Fisher information of the exact marginal law of the listed nodes, with
// parameters perturbed in stored coordinates (couplings propagate).
MetricSource fisher_metric_source(std::vector<std::string> observed_nodes);

struct IcmOptions {
  std::size_t samples = 100000;
  std::uint64_t seed = 0;
  // Null means Fisher over PA(i) and i.
  MetricSource metric;
  // Optional reparametrization xi -> theta over the coordinate list (parents
  // first, then child). The metric becomes J^T M J at chart_point.
  VectorMap chart;
  Vec chart_point;
  // Optional flows on the joint coordinate space; coordinate axes by default.
  std::vector<VectorField> parent_fields;
  std::vector<VectorField> child_fields;
  bool compute_metric = true;
};

struct IcmReport {
  std::string node;
  double structural_residual = 0.0;
  double offblock_ratio = 0.0;
  double bracket_witness = 0.0;
  std::size_t parent_dim = 0;
  std::size_t child_dim = 0;
  MetricEstimate metric;
};

IcmReport icm_witness(const ParametricScm& scm, const std::string& node,
                      const std::vector<ExogenousPoint>& grid, const IcmOptions& options = {});

// ||off-diagonal blocks||_F / ||M||_F for the split [0, parent_dim) | rest.
double offblock_ratio(const Mat& metric, std::size_t parent_dim);

struct ObsEquivalenceConfig {
  double noise = 0.1;
  double p = 0.5;
  double intervention_value = 1.0;
  double min_gap = 0.1;
};

struct ObsEquivalenceResult {
  ParametricScm causal;
  ParametricScm anticausal;
  ParametricScm confounded;
  std::vector<DistributionTable> joints;  // causal, anticausal, confounded over (X, Y)
  std::vector<double> do_answers;         // P(Y=1 | do(X=value)) in the same order
  double max_joint_tv = 0.0;
  double max_do_gap = 0.0;
  bool degenerate = false;
  DiagnosticReport report;
};

ObsEquivalenceResult obs_equivalence_demo(const ObsEquivalenceConfig& config = {},
                                          const Tolerances& tolerances = {});

struct CoinHypothesis {
  std::string name;
  double p_x = 0.5;   // marginal of the cause
  double noise = 0.1; // flip rate between X and Y
};

// Ways of realising one hypothesis as an SCM. All agree on the (X, Y) joint and
// differ in what do(X) cuts.
enum class SurgeryFamily { CutParent, CutChild, Confounded };

std::string surgery_family_name(SurgeryFamily f);
std::optional<SurgeryFamily> surgery_family_from_name(std::string_view name);
ParametricScm realize(const CoinHypothesis& h, SurgeryFamily family);

struct Observation {
  int x = 0;
  int y = 0;
};

struct BayesSurgeryConfig {
  double intervention_value = 1.0;
  double min_gap = 0.1;
};

struct BayesSurgeryResult {
  std::vector<double> posterior_a;
  std::vector<double> posterior_b;
  double max_posterior_diff = 0.0;
  double do_answer_a = 0.0;
  double do_answer_b = 0.0;
  double gap = 0.0;
  bool uninformative = false;
  DiagnosticReport report;
};

// Throws PreconditionError if the two families disagree observationally on
// any hypothesis (joint TV > 1e-12).
BayesSurgeryResult bayes_surgery_demo(const std::vector<CoinHypothesis>& hypotheses,
                                      const std::vector<double>& prior, SurgeryFamily family_a,
                                      SurgeryFamily family_b, const std::vector<Observation>& data,
                                      const BayesSurgeryConfig& config = {},
                                      const Tolerances& tolerances = {});

}  // namespace mechdiag
