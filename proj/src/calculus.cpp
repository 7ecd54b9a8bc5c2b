#include "mechdiag/calculus.hpp"

#include <cmath>
#include <sstream>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

namespace mechdiag {

namespace {

std::string describe(const Vec& v) {
  std::ostringstream out;
  out << "(";
  for (Eigen::Index i = 0; i < v.size(); ++i) out << (i ? ", " : "") << v[i];
  out << ")";
  return out.str();
}

Vec probe(const VectorMap& f, const Vec& x, const Box& domain) {
  if (!domain.contains(x)) {
    throw NumericalDomainError("probe point " + describe(x) + " lies outside the declared domain");
  }
  Vec y = f(x);
  if (!y.allFinite()) {
    throw NumericalDomainError("map returned a non-finite value at " + describe(x));
  }
  return y;
}

Mat raw_jacobian(const VectorMap& f, const Vec& point, DiffMethod method, double h,
                 const Box& domain) {
  const Vec f0 = probe(f, point, domain);
  Mat jac(f0.size(), point.size());
  for (Eigen::Index j = 0; j < point.size(); ++j) {
    Vec plus = point;
    plus[j] += h;
    if (method == DiffMethod::Central) {
      Vec minus = point;
      minus[j] -= h;
      jac.col(j) = (probe(f, plus, domain) - probe(f, minus, domain)) / (2.0 * h);
    } else {
      jac.col(j) = (probe(f, plus, domain) - f0) / h;
    }
  }
  return jac;
}

}  // namespace

Box Box::uniform(Eigen::Index dim, double lo, double hi) {
  return {Vec::Constant(dim, lo), Vec::Constant(dim, hi)};
}

bool Box::contains(const Vec& point) const {
  if (!bounded()) return true;
  if (point.size() != lower.size()) return false;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    if (!(point[i] >= lower[i] && point[i] <= upper[i])) return false;
  }
  return true;
}

Mat jacobian(const VectorMap& f, const Vec& point, const DiffScheme& scheme, const Box& domain) {
  if (!(scheme.step > 0.0)) throw ShapeError("difference step must be positive");
  const Mat coarse = raw_jacobian(f, point, scheme.method, scheme.step, domain);
  if (!scheme.richardson) return coarse;
  const Mat fine = raw_jacobian(f, point, scheme.method, scheme.step / 2.0, domain);
  // Central error is O(h^2), forward O(h).
  const double order = scheme.method == DiffMethod::Central ? 4.0 : 2.0;
  return (order * fine - coarse) / (order - 1.0);
}

Vec gradient(const ScalarMap& f, const Vec& point, const DiffScheme& scheme, const Box& domain) {
  const VectorMap wrapped = [&f](const Vec& x) { return Vec::Constant(1, f(x)); };
  return jacobian(wrapped, point, scheme, domain).row(0).transpose();
}

double directional_derivative(const ScalarMap& f, const Vec& point, const Vec& direction,
                              const DiffScheme& scheme, const Box& domain) {
  if (direction.size() != point.size()) throw ShapeError("direction dimension mismatch");
  const VectorMap along = [&](const Vec& s) { return Vec::Constant(1, f(point + s[0] * direction)); };
  const VectorMap guarded = [&](const Vec& s) {
    const Vec x = point + s[0] * direction;
    if (!domain.contains(x)) {
      throw NumericalDomainError("directional probe " + describe(x) + " leaves the domain");
    }
    return along(s);
  };
  return jacobian(guarded, Vec::Zero(1), scheme)(0, 0);
}

Vec lie_bracket(const VectorField& x, const VectorField& y, const Vec& point,
                const DiffScheme& scheme) {
  if (x.dimension != y.dimension || point.size() != x.dimension) {
    throw ShapeError("lie_bracket: fields and point must share one dimension");
  }
  const Vec xv = probe(x.evaluate, point, x.domain);
  const Vec yv = probe(y.evaluate, point, y.domain);
  if (xv.size() != x.dimension || yv.size() != y.dimension) {
    throw ShapeError("lie_bracket: field output dimension differs from its declared dimension");
  }
  const Mat jx = jacobian(x.evaluate, point, scheme, x.domain);
  const Mat jy = jacobian(y.evaluate, point, scheme, y.domain);
  return jy * xv - jx * yv;
}

Vec integrate_flow(const VectorField& field, const Vec& start, double time) {
  constexpr double kSubstepsPerUnit = 16.0;
  const auto steps = std::max<long>(1, static_cast<long>(std::ceil(std::abs(time) * kSubstepsPerUnit)));
  const double h = time / static_cast<double>(steps);
  Vec state = start;
  auto eval = [&](const Vec& p) {
    Vec v = probe(field.evaluate, p, field.domain);
    if (v.size() != p.size()) throw ShapeError("vector field output dimension mismatch");
    return v;
  };
  for (long s = 0; s < steps; ++s) {
    const Vec k1 = eval(state);
    const Vec k2 = eval(state + 0.5 * h * k1);
    const Vec k3 = eval(state + 0.5 * h * k2);
    const Vec k4 = eval(state + h * k3);
    state += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  if (!field.domain.contains(state)) {
    throw NumericalDomainError("flow left the declared domain at " + describe(state));
  }
  return state;
}

double flow_commutator_witness(const VectorField& x, const VectorField& y, const Vec& point,
                               double t) {
  if (!(t > 0.0)) throw ShapeError("flow_commutator_witness: t must be positive");
  if (x.dimension != y.dimension || point.size() != x.dimension) {
    throw ShapeError("flow_commutator_witness: fields and point must share one dimension");
  }
  Vec p = integrate_flow(x, point, t);
  p = integrate_flow(y, p, t);
  p = integrate_flow(x, p, -t);
  p = integrate_flow(y, p, -t);
  return (p - point).norm() / (t * t);
}

MetricEstimate fisher_estimate(const ParametricSampler& model, const Vec& theta, std::size_t n,
                               std::uint64_t seed, const DiffScheme& scheme) {
  if (theta.size() != model.parameter_dim) throw ShapeError("fisher_estimate: theta dimension mismatch");
  if (n == 0) throw ShapeError("fisher_estimate: sample count must be positive");
  const Eigen::Index d = theta.size();
  Mat sum = Mat::Zero(d, d);
  Mat sum_sq = Mat::Zero(d, d);
  const Rng root(seed);
  for (std::size_t s = 0; s < n; ++s) {
    Rng rng = root.split(s);
    const Vec x = model.sample(theta, rng);
    Vec score;
    if (model.score) {
      score = model.score(x, theta);
    } else {
      const ScalarMap logp = [&](const Vec& th) {
        const double v = model.log_density(x, th);
        if (!std::isfinite(v)) {
          throw NumericalDomainError("degenerate density: sample has zero probability near theta");
        }
        return v;
      };
      if (!std::isfinite(model.log_density(x, theta))) {
        throw NumericalDomainError("degenerate density: sample has zero probability at theta");
      }
      score = gradient(logp, theta, scheme);
    }
    if (!score.allFinite()) throw NumericalDomainError("non-finite score");
    const Mat outer = score * score.transpose();
    sum += outer;
    sum_sq += outer.cwiseProduct(outer);
  }
  const double count = static_cast<double>(n);
  MetricEstimate est;
  est.sample_count = n;
  est.matrix = sum / count;
  est.matrix = 0.5 * (est.matrix + est.matrix.transpose()).eval();
  const Mat variance = (sum_sq / count - est.matrix.cwiseProduct(est.matrix)).cwiseMax(0.0);
  est.standard_error = (variance * (count / std::max(1.0, count - 1.0)) / count).cwiseSqrt();
  return est;
}

}  // namespace mechdiag
