#include "mechdiag/forgetting.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

namespace mechdiag {

std::size_t block_param_count(BlockKind kind, std::size_t in_dim, std::size_t out_dim, std::size_t hidden) {
  switch (kind) {
    case BlockKind::Scalar:
      return out_dim;
    case BlockKind::Affine:
      return out_dim * in_dim + out_dim;
    case BlockKind::Mlp:
      return hidden * in_dim + 2 * hidden + 1;
  }
  return 0;
}

std::vector<std::string> BlockModel::blocks() const {
  std::vector<std::string> out;
  for (const auto& m : mechanisms) {
    if (std::find(out.begin(), out.end(), m.block) == out.end()) out.push_back(m.block);
  }
  return out;
}

std::size_t BlockModel::mechanism_index(const std::string& name) const {
  for (std::size_t i = 0; i < mechanisms.size(); ++i) {
    if (mechanisms[i].name == name) return i;
  }
  throw ValidationError("unknown mechanism: " + name);
}

std::size_t BlockModel::input_dim_of(std::size_t j) const {
  const auto& m = mechanisms.at(j);
  if (m.input == "x") return input_dim;
  return mechanisms.at(mechanism_index(m.input)).out_dim;
}

std::size_t BlockModel::block_size(const std::string& block) const {
  for (std::size_t j = 0; j < mechanisms.size(); ++j) {
    const auto& m = mechanisms[j];
    if (m.block == block) return block_param_count(m.kind, input_dim_of(j), m.out_dim, m.hidden);
  }
  throw ValidationError("unknown block: " + block);
}

std::size_t BlockModel::block_offset(const std::string& block) const {
  std::size_t offset = 0;
  for (const auto& b : blocks()) {
    if (b == block) return offset;
    offset += block_size(b);
  }
  throw ValidationError("unknown block: " + block);
}

Eigen::Index BlockModel::dimension() const {
  std::size_t n = 0;
  for (const auto& b : blocks()) n += block_size(b);
  return static_cast<Eigen::Index>(n);
}

std::vector<std::string> BlockModel::issues() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  std::map<std::string, std::size_t> sizes;
  for (std::size_t j = 0; j < mechanisms.size(); ++j) {
    const auto& m = mechanisms[j];
    const std::string where = "mechanisms[" + std::to_string(j) + "]";
    if (m.name.empty() || m.name == "x") out.push_back(where + ".name: empty or reserved");
    if (!seen.insert(m.name).second) out.push_back(where + ".name: duplicate " + m.name);
    if (m.block.empty()) out.push_back(where + ".block: empty");
    if (m.out_dim == 0) out.push_back(where + ".out_dim: must be positive");
    if (m.kind == BlockKind::Mlp && (m.hidden == 0 || m.out_dim != 1)) {
      out.push_back(where + ": mlp needs hidden >= 1 and out_dim 1");
    }
    bool input_ok = m.input == "x";
    if (!input_ok) {
      for (std::size_t k = 0; k < j; ++k) input_ok |= mechanisms[k].name == m.input;
      if (!input_ok) out.push_back(where + ".input: '" + m.input + "' is not x or an earlier mechanism");
    }
    if (input_ok && !m.block.empty()) {
      const std::size_t size = block_param_count(m.kind, input_dim_of(j), m.out_dim, m.hidden);
      const auto [it, fresh] = sizes.emplace(m.block, size);
      if (!fresh && it->second != size) out.push_back(where + ".block: tied block " + m.block + " has another size");
    }
    for (std::size_t l = 0; l < m.leaks.size(); ++l) {
      const auto& leak = m.leaks[l];
      const std::string lw = where + ".leaks[" + std::to_string(l) + "]";
      if (leak.block == m.block) out.push_back(lw + ": leak from own block");
      if (!std::isfinite(leak.gain)) out.push_back(lw + ".gain: not finite");
    }
  }
  for (std::size_t j = 0; j < mechanisms.size(); ++j) {
    for (std::size_t l = 0; l < mechanisms[j].leaks.size(); ++l) {
      if (!sizes.count(mechanisms[j].leaks[l].block)) {
        out.push_back("mechanisms[" + std::to_string(j) + "].leaks[" + std::to_string(l) + "].block: unknown block");
      }
    }
  }
  return out;
}

namespace {

void require_model(const BlockModel& model) {
  const auto issues = model.issues();
  if (issues.empty()) return;
  std::string msg = "invalid block model:";
  for (const auto& i : issues) msg += "\n  " + i;
  throw ValidationError(msg);
}

Vec block_of(const BlockModel& model, const Vec& theta, const std::string& block) {
  return theta.segment(static_cast<Eigen::Index>(model.block_offset(block)),
                       static_cast<Eigen::Index>(model.block_size(block)));
}

void check_theta(const BlockModel& model, const Vec& theta) {
  if (theta.size() != model.dimension()) {
    throw ShapeError("theta has " + std::to_string(theta.size()) + " entries, model needs " +
                     std::to_string(model.dimension()));
  }
}

}  // namespace

Vec mechanism_output(const BlockModel& model, std::size_t j, const Vec& theta, const Vec& input) {
  const auto& m = model.mechanisms.at(j);
  const Vec p = block_of(model, theta, m.block);
  const auto in = static_cast<Eigen::Index>(model.input_dim_of(j));
  const auto out = static_cast<Eigen::Index>(m.out_dim);
  if (m.kind != BlockKind::Scalar && input.size() != in) throw ShapeError("mechanism " + m.name + ": input size");
  Vec y;
  switch (m.kind) {
    case BlockKind::Scalar:
      y = p;
      break;
    case BlockKind::Affine: {
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w(p.data(), out, in);
      y = w * input + p.segment(out * in, out);
      break;
    }
    case BlockKind::Mlp: {
      const auto h = static_cast<Eigen::Index>(m.hidden);
      const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> w1(p.data(), h, in);
      const Vec hidden = (w1 * input + p.segment(h * in, h)).array().tanh().matrix();
      y = Vec::Constant(1, p.segment(h * in + h, h).dot(hidden) + p(h * in + 2 * h));
      break;
    }
  }
  for (const auto& leak : m.leaks) y.array() += leak.gain * block_of(model, theta, leak.block).sum();
  return y;
}

Vec forward(const BlockModel& model, const Vec& theta, const Vec& x, const std::string& head) {
  check_theta(model, theta);
  const std::size_t j = model.mechanism_index(head);
  const auto& m = model.mechanisms[j];
  const Vec input = m.input == "x" ? x : forward(model, theta, x, m.input);
  return mechanism_output(model, j, theta, input);
}

std::set<std::string> structural_usage(const BlockModel& model, const Task& task) {
  std::set<std::string> out;
  std::string cur = task.head;
  while (cur != "x") {
    const auto& m = model.mechanisms[model.mechanism_index(cur)];
    out.insert(m.block);
    cur = m.input;
  }
  return out;
}

std::set<std::string> task_usage(const BlockModel& model, const Task& task) {
  return task.usage ? *task.usage : structural_usage(model, task);
}

std::vector<std::string> task_issues(const BlockModel& model, const Task& task) {
  std::vector<std::string> out;
  const std::string where = "task " + task.name;
  bool head_ok = false;
  for (const auto& m : model.mechanisms) head_ok |= m.name == task.head;
  if (!head_ok) {
    out.push_back(where + ".head: unknown mechanism " + task.head);
    return out;
  }
  if (task.inputs.empty()) out.push_back(where + ".data: empty dataset");
  if (task.inputs.size() != task.targets.size()) out.push_back(where + ".data: inputs and targets differ in length");
  const std::size_t out_dim = model.mechanisms[model.mechanism_index(task.head)].out_dim;
  for (std::size_t i = 0; i < std::min(task.inputs.size(), task.targets.size()); ++i) {
    if (task.inputs[i].size() != static_cast<Eigen::Index>(model.input_dim)) {
      out.push_back(where + ".data[" + std::to_string(i) + "].x: wrong size");
    }
    if (task.targets[i].size() != static_cast<Eigen::Index>(out_dim)) {
      out.push_back(where + ".data[" + std::to_string(i) + "].y: wrong size");
    }
    if (task.loss == LossKind::Logistic) {
      if (out_dim != 1) out.push_back(where + ".loss: logistic needs a scalar head");
      const double y = task.targets[i].size() ? task.targets[i](0) : 0;
      if (y != 0.0 && y != 1.0) out.push_back(where + ".data[" + std::to_string(i) + "].y: logistic target not 0/1");
    }
  }
  if (task.usage) {
    const auto blocks = model.blocks();
    for (const auto& b : *task.usage) {
      if (std::find(blocks.begin(), blocks.end(), b) == blocks.end()) out.push_back(where + ".usage: unknown block " + b);
    }
    for (const auto& b : structural_usage(model, task)) {
      if (!task.usage->count(b)) out.push_back(where + ".usage: omits block " + b + " on the head's path");
    }
  }
  return out;
}

double risk(const BlockModel& model, const Vec& theta, const Task& task, const std::vector<std::size_t>& rows) {
  std::vector<std::size_t> idx = rows;
  if (idx.empty()) {
    idx.resize(task.inputs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  if (idx.empty()) throw ValidationError("task " + task.name + " has no data");
  double total = 0.0;
  for (std::size_t i : idx) {
    const Vec pred = forward(model, theta, task.inputs.at(i), task.head);
    if (task.loss == LossKind::Squared) {
      total += (pred - task.targets[i]).squaredNorm();
    } else {
      const double z = pred(0);
      total += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - task.targets[i](0) * z;
    }
  }
  const double r = total / static_cast<double>(idx.size());
  if (!std::isfinite(r)) throw NumericalDomainError("non-finite risk for task " + task.name);
  return r;
}

Vec risk_gradient(const BlockModel& model, const Vec& theta, const Task& task, const std::vector<std::size_t>& rows) {
  return gradient([&](const Vec& t) { return risk(model, t, task, rows); }, theta);
}

namespace {

std::vector<double> per_block_inner(const BlockModel& model, const Vec& a, const Vec& b) {
  std::vector<double> out;
  std::size_t offset = 0;
  for (const auto& blk : model.blocks()) {
    const auto n = static_cast<Eigen::Index>(model.block_size(blk));
    out.push_back(a.segment(static_cast<Eigen::Index>(offset), n).dot(b.segment(static_cast<Eigen::Index>(offset), n)));
    offset += static_cast<std::size_t>(n);
  }
  return out;
}

double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na <= 1e-14 || nb <= 1e-14) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

}  // namespace

AlignmentRecord gradient_alignment(const BlockModel& model, const Vec& theta, const Task& a, const Task& b) {
  require_model(model);
  check_theta(model, theta);
  AlignmentRecord r;
  r.g_a = risk_gradient(model, theta, a);
  r.g_b = risk_gradient(model, theta, b);
  r.inner = r.g_a.dot(r.g_b);
  r.per_block = per_block_inner(model, r.g_a, r.g_b);
  r.rho = cosine(r.g_a, r.g_b);
  return r;
}

std::vector<Vec> probe_grid(const Box& box, std::size_t n, std::uint64_t seed) {
  if (!box.bounded()) throw ValidationError("probe box must be bounded");
  std::vector<Vec> out;
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng = Rng(seed).split(k);
    Vec p(box.lower.size());
    for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = rng.uniform(box.lower(i), box.upper(i));
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

Vec replace_block(const BlockModel& model, Vec theta, const std::string& block, const Vec& value) {
  theta.segment(static_cast<Eigen::Index>(model.block_offset(block)), value.size()) = value;
  return theta;
}

// Frobenius bound of a weight matrix whose entries range over the box.
double weight_bound(const Box& box, std::size_t offset, std::size_t count) {
  double s = 0.0;
  for (std::size_t i = offset; i < offset + count; ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    const double m = std::max(std::abs(box.lower(k)), std::abs(box.upper(k)));
    s += m * m;
  }
  return std::sqrt(s);
}

double input_jacobian_bound(const BlockModel& model, std::size_t j, const Box& box) {
  const auto& m = model.mechanisms[j];
  const std::size_t off = model.block_offset(m.block);
  const std::size_t in = model.input_dim_of(j);
  switch (m.kind) {
    case BlockKind::Scalar:
      return 0.0;
    case BlockKind::Affine:
      return weight_bound(box, off, m.out_dim * in);
    case BlockKind::Mlp:
      // |tanh'| <= 1, so ||w2^T D W1|| <= ||w2|| ||W1||_F.
      return weight_bound(box, off, m.hidden * in) * weight_bound(box, off + m.hidden * in + m.hidden, m.hidden);
  }
  return 0.0;
}

std::vector<Vec> mechanism_inputs(const BlockModel& model, const Vec& theta, std::size_t j,
                                  const std::vector<const Task*>& tasks) {
  const auto& m = model.mechanisms[j];
  std::vector<Vec> out;
  for (const Task* t : tasks) {
    for (std::size_t i = 0; i < std::min<std::size_t>(t->inputs.size(), 16); ++i) {
      out.push_back(m.input == "x" ? t->inputs[i] : forward(model, theta, t->inputs[i], m.input));
    }
  }
  return out;
}

}  // namespace

LapConstants lap_constants(const BlockModel& model, const Task& a, const Task& b, const Box& box,
                           const std::vector<Vec>& grid) {
  require_model(model);
  if (!box.bounded() || box.lower.size() != model.dimension()) {
    throw ValidationError("probe box must be bounded and match the parameter dimension");
  }
  for (const auto& p : grid) {
    if (p.size() != model.dimension() || !box.contains(p)) throw NumericalDomainError("probe point outside the probe box");
  }
  LapConstants r;
  const auto blocks = model.blocks();
  std::set<std::string> violations;
  for (const Task* task : {&a, &b}) {
    const auto usage = task_usage(model, *task);
    for (const auto& p : grid) {
      for (const auto& blk : blocks) {
        if (usage.count(blk)) continue;
        const Vec theta_i = block_of(model, p, blk);
        for (const auto& x : task->inputs) {
          const Mat j = jacobian([&](const Vec& v) { return forward(model, replace_block(model, p, blk, v), x, task->head); },
                                 theta_i);
          r.eps_loc = std::max(r.eps_loc, j.norm());
        }
        const Vec g = gradient([&](const Vec& v) { return risk(model, replace_block(model, p, blk, v), *task); }, theta_i);
        if (g.norm() > 1e-8) violations.insert(task->name + ":" + blk);
      }
    }
  }
  r.usage_violations.assign(violations.begin(), violations.end());
  for (const auto& p : grid) {
    for (std::size_t j = 0; j < model.mechanisms.size(); ++j) {
      const auto inputs = mechanism_inputs(model, p, j, {&a, &b});
      for (const auto& blk : blocks) {
        if (blk == model.mechanisms[j].block) continue;
        const Vec theta_i = block_of(model, p, blk);
        for (const auto& in : inputs) {
          const Mat jac = jacobian(
              [&](const Vec& v) { return mechanism_output(model, j, replace_block(model, p, blk, v), in); }, theta_i);
          r.eps_aut = std::max(r.eps_aut, jac.norm());
        }
      }
    }
  }
  for (const Task* task : {&a, &b}) {
    double prod = 1.0;
    std::string cur = task->head;
    while (cur != "x") {
      const std::size_t j = model.mechanism_index(cur);
      if (model.mechanisms[j].input != "x") prod *= input_jacobian_bound(model, j, box);
      cur = model.mechanisms[j].input;
    }
    r.c_est = std::max(r.c_est, prod);
  }
  return r;
}

namespace {

double local_smoothness(const BlockModel& model, const Task& task, const Vec& theta, double radius,
                        std::size_t probes, const Rng& base) {
  const Vec g0 = risk_gradient(model, theta, task);
  double best = 0.0;
  for (std::size_t k = 0; k < probes; ++k) {
    Rng rng = base.split(k);
    Vec d(theta.size());
    for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = rng.normal();
    if (d.norm() == 0.0) continue;
    d *= radius / d.norm();
    best = std::max(best, (risk_gradient(model, theta + d, task) - g0).norm() / radius);
  }
  return best;
}

std::set<std::string> shared_blocks(const BlockModel& model, const Task& a, const Task& b) {
  std::set<std::string> out;
  const auto sb = task_usage(model, b);
  for (const auto& blk : task_usage(model, a)) {
    if (sb.count(blk)) out.insert(blk);
  }
  return out;
}

}  // namespace

FirstOrderReport first_order_check(const BlockModel& model, const Vec& theta, const Task& a, const Task& b,
                                   const std::vector<double>& etas, std::uint64_t seed) {
  if (etas.size() < 3) throw PreconditionError("first-order check needs at least three step sizes");
  for (std::size_t i = 0; i < etas.size(); ++i) {
    if (!(etas[i] > 0) || (i > 0 && !(etas[i] < etas[i - 1]))) {
      throw PreconditionError("step sizes must be positive and strictly decreasing");
    }
  }
  const AlignmentRecord al = gradient_alignment(model, theta, a, b);
  const double r0 = risk(model, theta, a);
  FirstOrderReport rep;
  double lo = INFINITY, hi = 0.0;
  for (double eta : etas) {
    FirstOrderRow row;
    row.eta = eta;
    row.delta_ra = risk(model, theta - eta * al.g_b, a) - r0;
    row.predicted = -eta * al.inner;
    row.ratio = std::abs(row.delta_ra - row.predicted) / (eta * eta);
    lo = std::min(lo, row.ratio);
    hi = std::max(hi, row.ratio);
    rep.rows.push_back(row);
  }
  rep.ratio_spread = hi > 0 ? (hi - lo) / hi : 0.0;
  rep.disjoint = shared_blocks(model, a, b).empty();
  const double l_a = local_smoothness(model, a, theta, 1e-3, 16, Rng(seed, 11));
  rep.kappa = 0.5 * l_a * al.g_b.squaredNorm();
  if (rep.disjoint) {
    for (const auto& row : rep.rows) rep.within_kappa &= std::abs(row.delta_ra) <= rep.kappa * row.eta * row.eta;
  }
  return rep;
}

TrajectoryLog train_two_task(const BlockModel& model, const Vec& theta0, const Task& a, const Task& b,
                             const TrainConfig& config) {
  require_model(model);
  check_theta(model, theta0);
  if (config.steps == 0) throw PreconditionError("training needs at least one step");
  if (!(config.eta >= 0) || !std::isfinite(config.eta)) throw ValidationError("step size must be finite and nonnegative");
  TrajectoryLog log;
  log.blocks = model.blocks();
  Vec theta = theta0;
  const std::size_t n = b.inputs.size();
  const bool full = config.batch == 0 || config.batch >= n;
  for (std::size_t t = 0; t < config.steps; ++t) {
    StepRecord s;
    s.t = t;
    s.theta = theta;
    s.eta = config.eta;
    try {
      s.risk_a = risk(model, theta, a);
      s.risk_b = risk(model, theta, b);
    } catch (const NumericalDomainError&) {
      log.diverged = true;
      break;
    }
    if (s.risk_a > kDivergenceRisk || s.risk_b > kDivergenceRisk) {
      log.diverged = true;
      break;
    }
    s.g_a = risk_gradient(model, theta, a);
    s.g_b = risk_gradient(model, theta, b);
    if (full) {
      s.g_b_hat = s.g_b;
    } else {
      std::vector<std::size_t> idx(n);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      Rng rng = Rng(config.seed).split(t);
      for (std::size_t i = 0; i < config.batch; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
      idx.resize(config.batch);
      std::sort(idx.begin(), idx.end());
      s.g_b_hat = risk_gradient(model, theta, b, idx);
    }
    s.inner = s.g_a.dot(s.g_b);
    s.inner_hat = s.g_a.dot(s.g_b_hat);
    s.per_block = per_block_inner(model, s.g_a, s.g_b);
    s.rho = cosine(s.g_a, s.g_b);
    theta -= config.eta * s.g_b_hat;
    log.steps.push_back(std::move(s));
  }
  log.final_theta = theta;
  try {
    log.final_risk_a = risk(model, theta, a);
    log.final_risk_b = risk(model, theta, b);
    if (log.final_risk_a > kDivergenceRisk || log.final_risk_b > kDivergenceRisk) log.diverged = true;
  } catch (const NumericalDomainError&) {
    log.diverged = true;
    log.final_risk_a = log.final_risk_b = INFINITY;
  }
  return log;
}

double smoothness_estimate(const BlockModel& model, const Task& task, const TrajectoryLog& log,
                           std::size_t probes_per_point, std::uint64_t seed, std::size_t max_points) {
  std::vector<Vec> points;
  for (const auto& s : log.steps) points.push_back(s.theta);
  points.push_back(log.final_theta);
  double step = 0.0;
  for (const auto& s : log.steps) step = std::max(step, s.eta * s.g_b_hat.norm());
  const double radius = std::max(1e-3, step);
  const std::size_t stride = std::max<std::size_t>(1, (points.size() + max_points - 1) / std::max<std::size_t>(1, max_points));
  double best = 0.0;
  for (std::size_t k = 0; k < points.size(); k += stride) {
    best = std::max(best, local_smoothness(model, task, points[k], radius, probes_per_point, Rng(seed).split(k)));
  }
  return best;
}

MultistepReport multistep_bound_check(const TrajectoryLog& log, double smoothness) {
  if (log.steps.empty()) throw ValidationError("trajectory log has no steps");
  const Eigen::Index dim = log.steps.front().theta.size();
  for (const auto& s : log.steps) {
    if (s.theta.size() != dim || s.g_a.size() != dim || s.g_b_hat.size() != dim) {
      throw ValidationError("trajectory log step " + std::to_string(s.t) + " is missing gradient fields");
    }
  }
  if (!(smoothness >= 0)) throw ValidationError("smoothness estimate must be nonnegative");
  MultistepReport r;
  r.smoothness = kSmoothnessSafety * smoothness;
  r.measured = log.final_risk_a - log.steps.front().risk_a;
  double curv = 0.0;
  for (const auto& s : log.steps) {
    r.inner_term -= s.eta * s.inner_hat;
    curv += s.eta * s.eta * s.g_b_hat.squaredNorm();
  }
  r.curvature_term = 0.5 * r.smoothness * curv;
  r.rhs = r.inner_term + r.curvature_term;
  r.slack = r.rhs - r.measured;
  r.holds = r.measured <= r.rhs + 1e-12;
  return r;
}

LemmaReport lemma_check(const BlockModel& model, const Task& a, const Task& b, const TrajectoryLog& log,
                        const LapConstants& c) {
  LemmaReport rep;
  const auto shared = shared_blocks(model, a, b);
  for (const auto& s : log.steps) {
    double shared_sum = 0.0;
    for (const auto& blk : shared) {
      const auto off = static_cast<Eigen::Index>(model.block_offset(blk));
      const auto n = static_cast<Eigen::Index>(model.block_size(blk));
      shared_sum += s.g_a.segment(off, n).norm() * s.g_b.segment(off, n).norm();
    }
    LemmaStep step;
    step.t = s.t;
    step.lhs = std::abs(s.inner);
    step.rhs = c.c_est * shared_sum + c.c_est * (c.eps_loc + c.eps_aut) * s.g_a.norm() * s.g_b.norm();
    const double excess = step.lhs - step.rhs;
    if (rep.steps.empty() || excess > rep.max_excess) rep.max_excess = excess;
    if (excess > 1e-12 * std::max(1.0, s.g_a.norm() * s.g_b.norm())) rep.holds = false;
    rep.steps.push_back(step);
  }
  return rep;
}

}  // namespace mechdiag
