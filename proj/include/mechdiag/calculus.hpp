#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>

namespace mechdiag {

class Rng;

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Axis-aligned domain. An empty box (dimension 0) means "unbounded".
struct Box {
  Vec lower;
  Vec upper;

  static Box unbounded() { return {}; }
  static Box uniform(Eigen::Index dim, double lo, double hi);

  bool bounded() const { return lower.size() > 0; }
  bool contains(const Vec& point) const;
};

enum class DiffMethod { Central, Forward };

struct DiffScheme {
  DiffMethod method = DiffMethod::Central;
  double step = 1e-5;
  // One level of Richardson extrapolation (combines step h and h/2).
  bool richardson = false;
};

using VectorMap = std::function<Vec(const Vec&)>;
using ScalarMap = std::function<double(const Vec&)>;

struct VectorField {
  Eigen::Index dimension = 0;
  VectorMap evaluate;
  Box domain;
};

// Row = output index, column = input index. Probe points outside `domain` and
// non-finite outputs raise NumericalDomainError; nothing is clamped.
Mat jacobian(const VectorMap& f, const Vec& point, const DiffScheme& scheme = {},
             const Box& domain = {});
Vec gradient(const ScalarMap& f, const Vec& point, const DiffScheme& scheme = {},
             const Box& domain = {});
double directional_derivative(const ScalarMap& f, const Vec& point, const Vec& direction,
                              const DiffScheme& scheme = {}, const Box& domain = {});

// [X, Y](p) = J_Y(p) X(p) - J_X(p) Y(p).
Vec lie_bracket(const VectorField& x, const VectorField& y, const Vec& point,
                const DiffScheme& scheme = {});

// Fixed-step RK4 with 16 substeps per unit time (at least one substep).
Vec integrate_flow(const VectorField& field, const Vec& start, double time);

// ||Phi^Y_{-t} o Phi^X_{-t} o Phi^Y_t o Phi^X_t (p) - p|| / t^2.
double flow_commutator_witness(const VectorField& x, const VectorField& y, const Vec& point,
                               double t);

struct MetricEstimate {
  Mat matrix;
  std::size_t sample_count = 0;
  Mat standard_error;
};

// A parametric family that can draw samples and score them.
struct ParametricSampler {
  Eigen::Index parameter_dim = 0;
  std::function<Vec(const Vec& theta, Rng& rng)> sample;
  std::function<double(const Vec& x, const Vec& theta)> log_density;
  // Optional closed-form score; central differences of log_density otherwise.
  std::function<Vec(const Vec& x, const Vec& theta)> score;
};

// Empirical mean of score outer products with per-entry standard errors.
MetricEstimate fisher_estimate(const ParametricSampler& model, const Vec& theta, std::size_t n,
                               std::uint64_t seed, const DiffScheme& scheme = {});

}  // namespace mechdiag
