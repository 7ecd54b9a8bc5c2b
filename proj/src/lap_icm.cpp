#include "mechdiag/lap_icm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

namespace mechdiag {

namespace {

double latent_shift(const ParametricScm& scm, const std::string& node, const ExogenousPoint& u) {
  if (!scm.noise_coupling) return 0.0;
  const auto& m = scm.noise_coupling->members;
  return std::find(m.begin(), m.end(), node) != m.end() ? u.latent : 0.0;
}

// The mechanism as a function of its own parameters at fixed parents and noise.
double mechanism_map(const MechanismSpec& m, const std::vector<double>& pa, double u,
                     const std::vector<double>& params) {
  if (m.primitive == Primitive::Cpt) {
    std::size_t row = 0;
    for (double v : pa) row = (row << 1) | (std::lround(v) != 0 ? 1u : 0u);
    return std::clamp(params[row], 0.0, 1.0);
  }
  return apply_mechanism(m, pa, u, params);
}

std::pair<std::size_t, std::size_t> distinct_pair(const ParametricScm& scm, const std::string& source,
                                                  const std::string& target) {
  require_valid(scm);
  const std::size_t a = scm.require_index(source);
  const std::size_t i = scm.require_index(target);
  if (a == i) throw ValidationError("source and target must differ: " + source);
  return {a, i};
}

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

double locality_residual(const ParametricScm& scm, const std::string& source,
                         const std::string& target, const std::vector<ExogenousPoint>& grid,
                         const DiffScheme& scheme) {
  const auto [a, i] = distinct_pair(scm, source, target);
  const ParamBlocks eff = effective_params(scm, stored_params(scm));
  double sup = 0.0;
  for (const auto& u : grid) {
    check_probe_point(scm, u);
    const double xa = solve(scm, u, eff)[a];
    const ScalarMap along = [&, a = a, i = i](const Vec& s) {
      return solve(scm, u, eff, ForcedValue{a, xa + s(0)})[i];
    };
    sup = std::max(sup, std::abs(gradient(along, Vec::Zero(1), scheme)(0)));
  }
  return sup;
}

double autonomy_residual(const ParametricScm& scm, const std::string& source,
                         const std::string& target, const std::vector<ExogenousPoint>& grid,
                         const DiffScheme& scheme) {
  const auto [a, i] = distinct_pair(scm, source, target);
  const ParamBlocks stored = stored_params(scm);
  if (stored[a].empty()) return 0.0;
  const ParamBlocks eff = effective_params(scm, stored);
  const MechanismSpec& m = scm.mechanisms[i];
  double sup = 0.0;
  for (const auto& u : grid) {
    check_probe_point(scm, u);
    const std::vector<double> state = solve(scm, u, eff);
    std::vector<double> pa;
    for (const auto& p : m.parents) pa.push_back(state[scm.require_index(p)]);
    const double noise = u.noise[i] + latent_shift(scm, m.node, u);
    const ScalarMap perturbed = [&, a = a, i = i](const Vec& theta) {
      ParamBlocks st = stored;
      st[a].assign(theta.data(), theta.data() + theta.size());
      return mechanism_map(m, pa, noise, effective_params(scm, st)[i]);
    };
    sup = std::max(sup, gradient(perturbed, to_vec(stored[a]), scheme).norm());
  }
  return sup;
}

LapReport lap_witness(const ParametricScm& scm, const std::string& source, const std::string& target,
                      const std::vector<ExogenousPoint>& grid, double tolerance) {
  LapReport r;
  r.source = source;
  r.target = target;
  r.locality_residual = locality_residual(scm, source, target, grid);
  r.autonomy_residual = autonomy_residual(scm, source, target, grid);
  r.descendant = is_descendant(scm, source, target);
  r.passed = r.descendant ||
             (r.locality_residual <= tolerance && r.autonomy_residual <= tolerance);
  return r;
}

std::vector<LapReport> lap_sweep(const ParametricScm& scm, const std::vector<ExogenousPoint>& grid,
                                 double tolerance) {
  std::vector<LapReport> out;
  for (const auto& a : scm.mechanisms) {
    for (const auto& i : scm.mechanisms) {
      if (a.node != i.node) out.push_back(lap_witness(scm, a.node, i.node, grid, tolerance));
    }
  }
  return out;
}

namespace {

struct CachedLaw {
  DistributionTable table;
  std::vector<DistributionTable::Assignment> atoms;
  std::vector<double> cdf;
};

}  // namespace

MetricSource fisher_metric_source(std::vector<std::string> observed_nodes) {
  return [observed = std::move(observed_nodes)](const ParametricScm& scm,
                                                const std::vector<ParamRef>& coords,
                                                std::size_t samples, std::uint64_t seed) {
    std::vector<std::pair<std::size_t, std::size_t>> slots;
    Vec theta0(static_cast<Eigen::Index>(coords.size()));
    for (std::size_t j = 0; j < coords.size(); ++j) {
      const std::size_t n = scm.require_index(coords[j].node);
      if (coords[j].index >= scm.mechanisms[n].params.size()) {
        throw ValidationError("parameter index out of range for node " + coords[j].node);
      }
      slots.emplace_back(n, coords[j].index);
      theta0(static_cast<Eigen::Index>(j)) = scm.mechanisms[n].params[coords[j].index];
    }
    auto cache = std::make_shared<std::map<std::vector<double>, CachedLaw>>();
    auto law = [&scm, slots, observed, cache](const Vec& theta) -> const CachedLaw& {
      std::vector<double> key(theta.data(), theta.data() + theta.size());
      auto it = cache->find(key);
      if (it != cache->end()) return it->second;
      ParametricScm moved = scm;
      for (std::size_t j = 0; j < slots.size(); ++j) {
        moved.mechanisms[slots[j].first].params[slots[j].second] = key[j];
      }
      CachedLaw entry;
      entry.table = enumerate_joint(moved).marginal(observed);
      double acc = 0.0;
      for (const auto& [a, p] : entry.table.atoms()) {
        acc += p;
        entry.atoms.push_back(a);
        entry.cdf.push_back(acc);
      }
      return cache->emplace(std::move(key), std::move(entry)).first->second;
    };
    ParametricSampler sampler;
    sampler.parameter_dim = theta0.size();
    sampler.sample = [law](const Vec& theta, Rng& rng) {
      const CachedLaw& l = law(theta);
      const double r = rng.uniform() * l.cdf.back();
      const auto pos = std::upper_bound(l.cdf.begin(), l.cdf.end(), r) - l.cdf.begin();
      const auto& a = l.atoms[std::min<std::size_t>(static_cast<std::size_t>(pos), l.atoms.size() - 1)];
      return to_vec(a);
    };
    sampler.log_density = [law](const Vec& x, const Vec& theta) {
      return std::log(law(theta).table.probability(std::vector<double>(x.data(), x.data() + x.size())));
    };
    return fisher_estimate(sampler, theta0, samples, seed);
  };
}

double offblock_ratio(const Mat& metric, std::size_t parent_dim) {
  const double total = metric.norm();
  if (total == 0.0) return 0.0;
  const auto p = static_cast<Eigen::Index>(parent_dim);
  const auto c = metric.rows() - p;
  const double off = std::sqrt(metric.topRightCorner(p, c).squaredNorm() +
                               metric.bottomLeftCorner(c, p).squaredNorm());
  return std::min(1.0, off / total);
}

IcmReport icm_witness(const ParametricScm& scm, const std::string& node,
                      const std::vector<ExogenousPoint>& grid, const IcmOptions& options) {
  require_valid(scm);
  const MechanismSpec& m = scm.mechanism(node);
  if (m.parents.empty()) throw ValidationError("icm witness needs a node with parents: " + node);
  IcmReport r;
  r.node = node;
  for (const auto& p : m.parents) {
    r.structural_residual = std::max(r.structural_residual, autonomy_residual(scm, p, node, grid));
  }
  std::vector<ParamRef> coords;
  for (const auto& p : m.parents) {
    for (std::size_t k = 0; k < scm.mechanism(p).params.size(); ++k) coords.push_back({p, k});
  }
  r.parent_dim = coords.size();
  for (std::size_t k = 0; k < m.params.size(); ++k) coords.push_back({node, k});
  r.child_dim = coords.size() - r.parent_dim;
  const auto dim = static_cast<Eigen::Index>(coords.size());

  Vec theta0(dim);
  for (Eigen::Index j = 0; j < dim; ++j) {
    const auto& c = coords[static_cast<std::size_t>(j)];
    theta0(j) = scm.mechanism(c.node).params[c.index];
  }
  const Vec base_point = options.chart ? options.chart_point : theta0;

  if (options.compute_metric && r.parent_dim > 0 && r.child_dim > 0) {
    std::vector<std::string> observed = m.parents;
    observed.push_back(node);
    const MetricSource source = options.metric ? options.metric : fisher_metric_source(observed);
    r.metric = source(scm, coords, options.samples, options.seed);
    if (options.chart) {
      const Mat j = jacobian(options.chart, options.chart_point);
      r.metric.matrix = j.transpose() * r.metric.matrix * j;
    }
    r.offblock_ratio = offblock_ratio(r.metric.matrix, r.parent_dim);
  }

  std::vector<VectorField> parent_fields = options.parent_fields;
  std::vector<VectorField> child_fields = options.child_fields;
  auto axis = [dim](Eigen::Index k) {
    return VectorField{dim, [dim, k](const Vec&) { return Vec(Vec::Unit(dim, k)); }, {}};
  };
  if (parent_fields.empty()) {
    for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(r.parent_dim); ++k) parent_fields.push_back(axis(k));
  }
  if (child_fields.empty()) {
    for (Eigen::Index k = static_cast<Eigen::Index>(r.parent_dim); k < dim; ++k) child_fields.push_back(axis(k));
  }
  for (const auto& x : parent_fields) {
    for (const auto& y : child_fields) {
      r.bracket_witness = std::max(r.bracket_witness, lie_bracket(x, y, base_point).norm());
    }
  }
  return r;
}

namespace {

MechanismSpec coin(const std::string& name, double p) {
  return {name, {}, Primitive::Cpt, {p}, NoiseSpec::uniform(0, 1), 0};
}

MechanismSpec xor_of(const std::string& name, const std::string& parent, NoiseSpec noise) {
  return {name, {parent}, Primitive::XorNoise, {}, noise, 0};
}

// P(X=1 | Y=y) rows for the reversed factorisation of (p, eps).
MechanismSpec reversed_child(const std::string& name, const std::string& parent, double p, double eps) {
  const double py = p * (1 - eps) + (1 - p) * eps;
  const double row0 = py < 1.0 ? p * eps / (1 - py) : 0.0;
  const double row1 = py > 0.0 ? p * (1 - eps) / py : 0.0;
  return {name, {parent}, Primitive::Cpt, {row0, row1}, NoiseSpec::uniform(0, 1), 0};
}

double do_answer(const ParametricScm& m, double value) {
  return interventional_distribution(m, Intervention::set("X", value), {"Y"}).probability({1.0});
}

}  // namespace

std::string surgery_family_name(SurgeryFamily f) {
  switch (f) {
    case SurgeryFamily::CutParent:
      return "cut-parent";
    case SurgeryFamily::CutChild:
      return "cut-child";
    case SurgeryFamily::Confounded:
      return "confounded";
  }
  return "unknown";
}

std::optional<SurgeryFamily> surgery_family_from_name(std::string_view name) {
  for (auto f : {SurgeryFamily::CutParent, SurgeryFamily::CutChild, SurgeryFamily::Confounded}) {
    if (surgery_family_name(f) == name) return f;
  }
  return std::nullopt;
}

ParametricScm realize(const CoinHypothesis& h, SurgeryFamily family) {
  const double py = h.p_x * (1 - h.noise) + (1 - h.p_x) * h.noise;
  switch (family) {
    case SurgeryFamily::CutParent:
      return {{coin("X", h.p_x), xor_of("Y", "X", NoiseSpec::bernoulli(h.noise))}};
    case SurgeryFamily::CutChild:
      return {{coin("Y", py), reversed_child("X", "Y", h.p_x, h.noise)}};
    case SurgeryFamily::Confounded:
      return {{coin("C", h.p_x), xor_of("X", "C", NoiseSpec::point(0)),
               xor_of("Y", "C", NoiseSpec::bernoulli(h.noise))}};
  }
  throw ValidationError("unknown surgery family");
}

ObsEquivalenceResult obs_equivalence_demo(const ObsEquivalenceConfig& config, const Tolerances& tol) {
  if (!(config.noise >= 0 && config.noise <= 1 && config.p >= 0 && config.p <= 1)) {
    throw ValidationError("noise and p must lie in [0, 1]");
  }
  ObsEquivalenceResult r;
  const CoinHypothesis h{"config", config.p, config.noise};
  r.causal = realize(h, SurgeryFamily::CutParent);
  r.anticausal = realize(h, SurgeryFamily::CutChild);
  r.confounded = realize(h, SurgeryFamily::Confounded);
  const std::vector<std::pair<std::string, const ParametricScm*>> models{
      {"causal", &r.causal}, {"anticausal", &r.anticausal}, {"confounded", &r.confounded}};
  for (const auto& [name, m] : models) {
    r.joints.push_back(enumerate_joint(*m).marginal({"X", "Y"}));
    r.do_answers.push_back(do_answer(*m, config.intervention_value));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = a + 1; b < 3; ++b) {
      r.max_joint_tv = std::max(r.max_joint_tv, r.joints[a].total_variation(r.joints[b]));
      r.max_do_gap = std::max(r.max_do_gap, std::abs(r.do_answers[a] - r.do_answers[b]));
    }
  }
  const double min_gap = tol.get("min_do_gap", config.min_gap);
  r.degenerate = r.max_do_gap < min_gap;

  auto& rep = r.report;
  rep.add_check("joint_tv_max", "obs-equivalence/same-joint", "joint_tv", r.max_joint_tv, tol, 1e-12,
                Comparison::AtMost);
  rep.add_check("do_gap_max", "obs-equivalence/distinct-do", "min_do_gap", r.max_do_gap, min_gap,
                Comparison::AtLeast);
  Table& joints = rep.add_table("joints", {"model", "x", "y", "probability"});
  for (std::size_t k = 0; k < 3; ++k) {
    for (int x = 0; x < 2; ++x) {
      for (int y = 0; y < 2; ++y) {
        joints.rows.push_back({models[k].first, x, y, r.joints[k].probability({double(x), double(y)})});
      }
    }
  }
  Table& answers = rep.add_table("do_answers", {"model", "intervention_value", "p_y1"});
  for (std::size_t k = 0; k < 3; ++k) {
    answers.rows.push_back({models[k].first, config.intervention_value, r.do_answers[k]});
  }
  if (r.degenerate) rep.notes.push_back("degenerate configuration: interventional answers coincide");
  return r;
}

namespace {

double joint_prob(const DistributionTable& t, const Observation& o) {
  return t.probability({double(o.x), double(o.y)});
}

std::vector<double> posterior(const std::vector<DistributionTable>& joints, const std::vector<double>& prior,
                              const std::vector<Observation>& data) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> logp(prior.size());
  for (std::size_t h = 0; h < prior.size(); ++h) {
    logp[h] = prior[h] > 0 ? std::log(prior[h]) : neg_inf;
    for (const auto& o : data) {
      if (logp[h] == neg_inf) break;
      const double p = joint_prob(joints[h], o);
      logp[h] = p > 0 ? logp[h] + std::log(p) : neg_inf;
    }
  }
  const double top = *std::max_element(logp.begin(), logp.end());
  if (top == neg_inf) throw PreconditionError("data has zero probability under every hypothesis");
  double z = 0.0;
  for (double l : logp) z += std::exp(l - top);
  std::vector<double> out;
  for (double l : logp) out.push_back(std::exp(l - top) / z);
  return out;
}

}  // namespace

BayesSurgeryResult bayes_surgery_demo(const std::vector<CoinHypothesis>& hypotheses,
                                      const std::vector<double>& prior, SurgeryFamily family_a,
                                      SurgeryFamily family_b, const std::vector<Observation>& data,
                                      const BayesSurgeryConfig& config, const Tolerances& tol) {
  if (hypotheses.empty() || prior.size() != hypotheses.size()) {
    throw ValidationError("need one prior weight per hypothesis");
  }
  double mass = 0.0;
  for (double w : prior) {
    if (!(w >= 0)) throw ValidationError("prior weights must be nonnegative");
    mass += w;
  }
  if (std::abs(mass - 1.0) > 1e-12) throw ValidationError("prior weights must sum to 1");
  for (const auto& o : data) {
    if ((o.x != 0 && o.x != 1) || (o.y != 0 && o.y != 1)) throw ValidationError("observations must be binary");
  }

  const double agreement_tol = 1e-12;
  std::vector<DistributionTable> joints_a, joints_b;
  double max_tv = 0.0;
  for (const auto& h : hypotheses) {
    joints_a.push_back(enumerate_joint(realize(h, family_a)).marginal({"X", "Y"}));
    joints_b.push_back(enumerate_joint(realize(h, family_b)).marginal({"X", "Y"}));
    const double tv = joints_a.back().total_variation(joints_b.back());
    max_tv = std::max(max_tv, tv);
    if (tv > agreement_tol) {
      throw PreconditionError("surgery families disagree observationally on hypothesis '" + h.name + "'");
    }
  }

  BayesSurgeryResult r;
  r.posterior_a = posterior(joints_a, prior, data);
  r.posterior_b = posterior(joints_b, prior, data);
  for (std::size_t h = 0; h < hypotheses.size(); ++h) {
    r.max_posterior_diff = std::max(r.max_posterior_diff, std::abs(r.posterior_a[h] - r.posterior_b[h]));
    r.do_answer_a += r.posterior_a[h] * do_answer(realize(hypotheses[h], family_a), config.intervention_value);
    r.do_answer_b += r.posterior_b[h] * do_answer(realize(hypotheses[h], family_b), config.intervention_value);
  }
  r.gap = std::abs(r.do_answer_a - r.do_answer_b);
  r.uninformative = family_a == family_b || r.gap <= 1e-12;

  auto& rep = r.report;
  rep.add_check("observational_agreement", "bayes-surgery/obs-agreement", "joint_tv", max_tv, tol,
                agreement_tol, Comparison::AtMost);
  rep.add_check("posterior_equality", "bayes-surgery/posterior-equal", "posterior_diff",
                r.max_posterior_diff, tol, 1e-12, Comparison::AtMost);
  rep.add_check("do_answer_gap", "bayes-surgery/do-differs", "min_do_gap", r.gap, tol, config.min_gap,
                Comparison::AtLeast);
  Table& post = rep.add_table("posterior", {"hypothesis", "prior", surgery_family_name(family_a),
                                            surgery_family_name(family_b)});
  for (std::size_t h = 0; h < hypotheses.size(); ++h) {
    post.rows.push_back({hypotheses[h].name, prior[h], r.posterior_a[h], r.posterior_b[h]});
  }
  Table& ans = rep.add_table("do_answers", {"family", "intervention_value", "p_y1"});
  ans.rows.push_back({surgery_family_name(family_a), config.intervention_value, r.do_answer_a});
  ans.rows.push_back({surgery_family_name(family_b), config.intervention_value, r.do_answer_b});
  rep.notes.push_back("observations: " + std::to_string(data.size()));
  if (r.uninformative) rep.notes.push_back("uninformative demo: both families give the same interventional answer");
  return r;
}

}  // namespace mechdiag
