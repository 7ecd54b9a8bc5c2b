#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mechdiag/calculus.hpp"

namespace mechdiag {

enum class BlockKind { Scalar, Affine, Mlp };

// Adds gain * sum(theta_block) to every output coordinate of the mechanism.
struct Leak {
  std::string block;
  double gain = 0.0;
};

// Scalar: output = theta (out_dim entries), input ignored.
// Affine: output = W x + b, theta = [W row-major (out x in), b].
// Mlp: output = w2 . tanh(W1 x + b1) + b2, theta = [W1 (hidden x in), b1, w2, b2], out_dim 1.
struct BlockMechanism {
  std::string name;
  std::string block;
  BlockKind kind = BlockKind::Scalar;
  std::string input = "x";  // "x" or an earlier mechanism
  std::size_t out_dim = 1;
  std::size_t hidden = 0;
  std::vector<Leak> leaks;
};

struct BlockModel {
  std::size_t input_dim = 0;
  std::vector<BlockMechanism> mechanisms;

  // Blocks in order of first appearance; mechanisms naming the same block share it.
  std::vector<std::string> blocks() const;
  std::size_t block_size(const std::string& block) const;
  std::size_t block_offset(const std::string& block) const;
  Eigen::Index dimension() const;
  std::size_t mechanism_index(const std::string& name) const;
  std::size_t input_dim_of(std::size_t mechanism) const;
  // Empty when well formed.
  std::vector<std::string> issues() const;
};

std::size_t block_param_count(BlockKind kind, std::size_t in_dim, std::size_t out_dim, std::size_t hidden);

// Output of one mechanism on a given input, with its own block and leak blocks read from theta.
Vec mechanism_output(const BlockModel& model, std::size_t mechanism, const Vec& theta, const Vec& input);
Vec forward(const BlockModel& model, const Vec& theta, const Vec& x, const std::string& head);

enum class LossKind { Squared, Logistic };

struct Task {
  std::string name;
  std::string head;
  std::vector<Vec> inputs;
  std::vector<Vec> targets;  // logistic targets are 0 or 1
  LossKind loss = LossKind::Squared;
  std::optional<std::set<std::string>> usage;  // declared block usage; structural when absent
};

// Blocks owned by the head's mechanism chain. Leaks are not part of the declared graph.
std::set<std::string> structural_usage(const BlockModel& model, const Task& task);
std::set<std::string> task_usage(const BlockModel& model, const Task& task);
std::vector<std::string> task_issues(const BlockModel& model, const Task& task);

// Mean loss over the listed rows (all rows when empty). Non-finite values raise NumericalDomainError.
double risk(const BlockModel& model, const Vec& theta, const Task& task, const std::vector<std::size_t>& rows = {});
Vec risk_gradient(const BlockModel& model, const Vec& theta, const Task& task,
                  const std::vector<std::size_t>& rows = {});

struct AlignmentRecord {
  Vec g_a;
  Vec g_b;
  double inner = 0.0;
  std::vector<double> per_block;  // same order as BlockModel::blocks()
  double rho = 0.0;               // 0 when either gradient vanishes
};

AlignmentRecord gradient_alignment(const BlockModel& model, const Vec& theta, const Task& a, const Task& b);

struct LapConstants {
  double eps_loc = 0.0;
  double eps_aut = 0.0;
  double c_est = 1.0;
  // Blocks outside a task's declared usage whose gradient is numerically nonzero.
  std::vector<std::string> usage_violations;
};

std::vector<Vec> probe_grid(const Box& box, std::size_t n, std::uint64_t seed);
// Raises NumericalDomainError when a grid point lies outside `box`.
LapConstants lap_constants(const BlockModel& model, const Task& a, const Task& b, const Box& box,
                           const std::vector<Vec>& grid);

struct FirstOrderRow {
  double eta = 0.0;
  double delta_ra = 0.0;
  double predicted = 0.0;  // -eta <g_A, g_B>
  double ratio = 0.0;      // |delta - predicted| / eta^2
};

struct FirstOrderReport {
  std::vector<FirstOrderRow> rows;
  double ratio_spread = 0.0;  // (max - min) / max over rows; 0 when all ratios vanish
  bool disjoint = false;
  double kappa = 0.0;         // (L_A / 2) ||g_B||^2 from a local curvature probe
  bool within_kappa = true;   // disjoint models only: |delta| <= kappa eta^2
};

// Etas must be strictly decreasing with at least three values.
FirstOrderReport first_order_check(const BlockModel& model, const Vec& theta, const Task& a, const Task& b,
                                   const std::vector<double>& etas, std::uint64_t seed);

struct TrainConfig {
  std::size_t steps = 100;
  double eta = 0.01;
  std::size_t batch = 0;  // 0 or >= rows means full batch
  std::uint64_t seed = 0;
};

struct StepRecord {
  std::size_t t = 0;
  Vec theta;
  double risk_a = 0.0;
  double risk_b = 0.0;
  Vec g_a;
  Vec g_b;
  Vec g_b_hat;  // minibatch gradient actually applied
  double inner = 0.0;
  double inner_hat = 0.0;  // <g_A, g_B_hat>
  std::vector<double> per_block;
  double rho = 0.0;
  double eta = 0.0;
};

struct TrajectoryLog {
  std::vector<std::string> blocks;
  std::vector<StepRecord> steps;
  Vec final_theta;
  double final_risk_a = 0.0;
  double final_risk_b = 0.0;
  bool diverged = false;
};

inline constexpr double kDivergenceRisk = 1e12;

TrajectoryLog train_two_task(const BlockModel& model, const Vec& theta0, const Task& a, const Task& b,
                             const TrainConfig& config);

// max ||g(theta + d) - g(theta)|| / ||d|| over random d at (up to max_points) logged points.
double smoothness_estimate(const BlockModel& model, const Task& task, const TrajectoryLog& log,
                           std::size_t probes_per_point, std::uint64_t seed, std::size_t max_points = 50);

inline constexpr double kSmoothnessSafety = 2.0;
inline constexpr const char* kSmoothnessCaveat = "empirical lower bound on L";

struct MultistepReport {
  double measured = 0.0;        // R_A(theta_T) - R_A(theta_0)
  double inner_term = 0.0;      // -eta sum <g_A, g_B_hat>
  double curvature_term = 0.0;  // (L / 2) eta^2 sum ||g_B_hat||^2
  double rhs = 0.0;
  double smoothness = 0.0;      // L actually used (safety factor applied)
  double slack = 0.0;           // rhs - measured
  bool holds = false;
};

// Applies kSmoothnessSafety to `smoothness`. Incomplete logs raise ValidationError.
MultistepReport multistep_bound_check(const TrajectoryLog& log, double smoothness);

struct LemmaStep {
  std::size_t t = 0;
  double lhs = 0.0;
  double rhs = 0.0;
};

struct LemmaReport {
  std::vector<LemmaStep> steps;
  double max_excess = 0.0;  // max(lhs - rhs), <= 0 when the bound holds
  bool holds = true;
};

LemmaReport lemma_check(const BlockModel& model, const Task& a, const Task& b, const TrajectoryLog& log,
                        const LapConstants& constants);

}  // namespace mechdiag
