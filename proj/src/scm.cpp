#include "mechdiag/scm.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

namespace mechdiag {

namespace {

struct PrimitiveInfo {
  Primitive primitive;
  const char* name;
};

constexpr PrimitiveInfo kPrimitives[] = {
    {Primitive::Affine, "affine"},         {Primitive::XorNoise, "xor-noise"},
    {Primitive::LogisticGate, "logistic-gate"}, {Primitive::Cpt, "cpt"},
    {Primitive::Polynomial, "polynomial"}, {Primitive::ReluMlp, "relu-mlp"},
};

int as_bit(double v) { return std::lround(v) != 0 ? 1 : 0; }

int parity(double v) { return static_cast<int>(std::lround(v) & 1L); }

}  // namespace

bool NoiseSpec::contains(double u) const {
  switch (kind) {
    case NoiseKind::Bernoulli:
      return u == 0.0 || u == 1.0;
    case NoiseKind::Uniform:
      return u >= a && u <= b;
    case NoiseKind::Gaussian:
      return std::isfinite(u);
    case NoiseKind::PointMass:
      return u == a;
  }
  return false;
}

std::string primitive_name(Primitive p) {
  for (const auto& info : kPrimitives) {
    if (info.primitive == p) return info.name;
  }
  return "unknown";
}

std::optional<Primitive> primitive_from_name(std::string_view name) {
  for (const auto& info : kPrimitives) {
    if (name == info.name) return info.primitive;
  }
  return std::nullopt;
}

std::size_t primitive_param_count(Primitive p, std::size_t k, std::size_t hidden_width) {
  switch (p) {
    case Primitive::Affine:
    case Primitive::LogisticGate:
      return k + 1;
    case Primitive::XorNoise:
      return 0;
    case Primitive::Cpt:
      return std::size_t{1} << k;
    case Primitive::Polynomial:
      return 1 + 3 * k;
    case Primitive::ReluMlp:
      return hidden_width * k + 2 * hidden_width + 1;
  }
  return 0;
}

MechanismCategory mechanism_category(Primitive p) {
  switch (p) {
    case Primitive::Cpt:
      return MechanismCategory::Table;
    case Primitive::Affine:
      return MechanismCategory::LinearNoise;
    default:
      return MechanismCategory::LibraryPrimitive;
  }
}

double apply_mechanism(const MechanismSpec& m, std::span<const double> pa, double u,
                       std::span<const double> th) {
  const std::size_t k = pa.size();
  switch (m.primitive) {
    case Primitive::Affine: {
      double s = th[k] + u;
      for (std::size_t j = 0; j < k; ++j) s += th[j] * pa[j];
      return s;
    }
    case Primitive::XorNoise: {
      int bit = parity(u);
      for (double v : pa) bit ^= parity(v);
      return static_cast<double>(bit);
    }
    case Primitive::LogisticGate: {
      double s = th[k];
      for (std::size_t j = 0; j < k; ++j) s += th[j] * pa[j];
      return 1.0 / (1.0 + std::exp(-s)) + u;
    }
    case Primitive::Cpt: {
      std::size_t row = 0;
      for (double v : pa) row = (row << 1) | static_cast<std::size_t>(as_bit(v));
      const double q = std::clamp(th[row], 0.0, 1.0);
      return u < q ? 1.0 : 0.0;
    }
    case Primitive::Polynomial: {
      double s = th[0] + u;
      for (std::size_t j = 0; j < k; ++j) {
        const double x = pa[j];
        s += th[1 + 3 * j] * x + th[2 + 3 * j] * x * x + th[3 + 3 * j] * x * x * x;
      }
      return s;
    }
    case Primitive::ReluMlp: {
      const std::size_t h = m.hidden_width;
      double out = th[h * k + 2 * h] + u;
      for (std::size_t r = 0; r < h; ++r) {
        double z = th[h * k + r];
        for (std::size_t j = 0; j < k; ++j) z += th[r * k + j] * pa[j];
        out += th[h * k + h + r] * std::max(0.0, z);
      }
      return out;
    }
  }
  return 0.0;
}

std::vector<std::string> ParametricScm::nodes() const {
  std::vector<std::string> out;
  out.reserve(mechanisms.size());
  for (const auto& m : mechanisms) out.push_back(m.node);
  return out;
}

std::optional<std::size_t> ParametricScm::index_of(std::string_view node) const {
  for (std::size_t i = 0; i < mechanisms.size(); ++i) {
    if (mechanisms[i].node == node) return i;
  }
  return std::nullopt;
}

std::size_t ParametricScm::require_index(std::string_view node) const {
  const auto i = index_of(node);
  if (!i) throw ValidationError("unknown node: " + std::string(node));
  return *i;
}

const MechanismSpec& ParametricScm::mechanism(std::string_view node) const {
  return mechanisms[require_index(node)];
}

bool ValidationReport::has(std::string_view code) const {
  return std::any_of(violations.begin(), violations.end(),
                     [&](const Violation& v) { return v.code == code; });
}

namespace {

// Kahn's algorithm over declared parents; returns nullopt when a cycle remains.
std::optional<std::vector<std::size_t>> try_topological(const ParametricScm& scm) {
  const std::size_t n = scm.mechanisms.size();
  std::vector<std::size_t> indegree(n, 0);
  std::vector<std::vector<std::size_t>> children(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& p : scm.mechanisms[i].parents) {
      const auto j = scm.index_of(p);
      if (!j) continue;
      children[*j].push_back(i);
      ++indegree[i];
    }
  }
  std::vector<std::size_t> order;
  std::vector<std::size_t> ready;
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) ready.push_back(i);
  }
  // Lowest declaration index first keeps the order deterministic.
  while (!ready.empty()) {
    const auto it = std::min_element(ready.begin(), ready.end());
    const std::size_t i = *it;
    ready.erase(it);
    order.push_back(i);
    for (std::size_t c : children[i]) {
      if (--indegree[c] == 0) ready.push_back(c);
    }
  }
  if (order.size() != n) return std::nullopt;
  return order;
}

}  // namespace

ValidationReport validate(const ParametricScm& scm) {
  ValidationReport report;
  auto add = [&](std::string code, std::string node, std::string msg) {
    report.violations.push_back({std::move(code), std::move(node), std::move(msg)});
  };
  std::set<std::string> names;
  for (const auto& m : scm.mechanisms) {
    if (m.node.empty()) add("missing_name", "", "mechanism without a node name");
    if (!names.insert(m.node).second) add("duplicate_node", m.node, "node declared twice");
  }
  for (const auto& m : scm.mechanisms) {
    std::set<std::string> seen;
    for (const auto& p : m.parents) {
      if (!names.count(p)) add("missing_parent", m.node, "parent '" + p + "' is not a declared node");
      if (!seen.insert(p).second) add("duplicate_parent", m.node, "parent '" + p + "' listed twice");
    }
    if (m.primitive == Primitive::ReluMlp && m.hidden_width == 0) {
      add("arity_mismatch", m.node, "relu-mlp requires a positive hidden width");
    }
    const std::size_t expected = primitive_param_count(m.primitive, m.parents.size(), m.hidden_width);
    if (m.params.size() != expected) {
      add("arity_mismatch", m.node,
          primitive_name(m.primitive) + " with " + std::to_string(m.parents.size()) +
              " parents expects " + std::to_string(expected) + " parameters, got " +
              std::to_string(m.params.size()));
    }
    for (double v : m.params) {
      if (!std::isfinite(v)) add("bad_params", m.node, "non-finite parameter");
    }
    const NoiseSpec& u = m.noise;
    const bool noise_ok = (u.kind == NoiseKind::Bernoulli && u.a >= 0.0 && u.a <= 1.0) ||
                          (u.kind == NoiseKind::Uniform && u.a <= u.b) ||
                          (u.kind == NoiseKind::Gaussian && u.b >= 0.0) ||
                          (u.kind == NoiseKind::PointMass && std::isfinite(u.a));
    if (!noise_ok) add("bad_noise", m.node, "malformed noise specification");
    if (m.primitive == Primitive::Cpt && !(u.kind == NoiseKind::Uniform && u.a == 0.0 && u.b == 1.0)) {
      add("bad_noise", m.node, "cpt mechanisms require uniform(0,1) noise");
    }
    if (m.primitive == Primitive::XorNoise && !u.finite_support()) {
      add("bad_noise", m.node, "xor-noise mechanisms require bernoulli or point-mass noise");
    }
  }
  if (!try_topological(scm)) add("cycle", "", "graph contains a directed cycle");
  if (scm.noise_coupling) {
    const auto& c = *scm.noise_coupling;
    if (scm.mode == ScmMode::Markovian) {
      add("dependent_noise", c.name, "markovian models require mutually independent noises");
    }
    if (c.values.empty() || c.values.size() != c.probabilities.size()) {
      add("bad_coupling", c.name, "latent needs one probability per value");
    }
    double mass = 0.0;
    for (double p : c.probabilities) {
      if (!(p >= 0.0)) add("bad_coupling", c.name, "negative latent probability");
      mass += p;
    }
    if (std::abs(mass - 1.0) > 1e-12) add("bad_coupling", c.name, "latent probabilities must sum to 1");
    for (const auto& member : c.members) {
      const auto i = scm.index_of(member);
      if (!i) {
        add("bad_coupling", c.name, "latent member '" + member + "' is not a declared node");
      } else if (scm.mechanisms[*i].primitive == Primitive::Cpt) {
        add("bad_coupling", member, "cpt mechanisms cannot share a latent noise");
      }
    }
  }
  for (const auto& pc : scm.parameter_couplings) {
    const auto t = scm.index_of(pc.node);
    const auto s = scm.index_of(pc.source);
    if (!t || !s) {
      add("bad_coupling", pc.node, "parameter coupling references an unknown node");
      continue;
    }
    if (*t == *s) add("bad_coupling", pc.node, "parameter coupling onto its own block");
    if (pc.index >= scm.mechanisms[*t].params.size()) {
      add("bad_coupling", pc.node, "coupled parameter index out of range");
    }
    if (!pc.frozen_source_value && pc.source_index >= scm.mechanisms[*s].params.size()) {
      add("bad_coupling", pc.node, "coupling source index out of range");
    }
  }
  return report;
}

void require_valid(const ParametricScm& scm) {
  const auto report = validate(scm);
  if (report.ok()) return;
  std::ostringstream msg;
  msg << "invalid model:";
  for (const auto& v : report.violations) {
    msg << " [" << v.code << (v.node.empty() ? "" : " @" + v.node) << "] " << v.message << ";";
  }
  throw ValidationError(msg.str());
}

std::vector<std::size_t> topological_order(const ParametricScm& scm) {
  auto order = try_topological(scm);
  if (!order) throw ValidationError("graph contains a directed cycle");
  return *order;
}

std::set<std::string> descendants(const ParametricScm& scm, std::string_view node) {
  const std::size_t start = scm.require_index(node);
  std::set<std::string> out;
  std::vector<std::size_t> frontier{start};
  while (!frontier.empty()) {
    const std::size_t cur = frontier.back();
    frontier.pop_back();
    for (const auto& m : scm.mechanisms) {
      if (std::find(m.parents.begin(), m.parents.end(), scm.mechanisms[cur].node) == m.parents.end()) {
        continue;
      }
      if (out.insert(m.node).second) frontier.push_back(scm.require_index(m.node));
    }
  }
  return out;
}

bool is_descendant(const ParametricScm& scm, std::string_view source, std::string_view target) {
  return descendants(scm, source).count(std::string(target)) > 0;
}

bool parameter_blocks_disjoint(const ParametricScm& scm, std::string_view a, std::string_view b) {
  for (const auto& pc : scm.parameter_couplings) {
    if (pc.frozen_source_value) continue;
    if ((pc.node == a && pc.source == b) || (pc.node == b && pc.source == a)) return false;
  }
  return true;
}

ParamBlocks stored_params(const ParametricScm& scm) {
  ParamBlocks out;
  out.reserve(scm.mechanisms.size());
  for (const auto& m : scm.mechanisms) out.push_back(m.params);
  return out;
}

ParamBlocks effective_params(const ParametricScm& scm, const ParamBlocks& stored) {
  ParamBlocks out = stored;
  for (const auto& pc : scm.parameter_couplings) {
    const std::size_t t = scm.require_index(pc.node);
    const double source = pc.frozen_source_value
                              ? *pc.frozen_source_value
                              : stored[scm.require_index(pc.source)][pc.source_index];
    out[t][pc.index] += pc.gain * source;
  }
  return out;
}

namespace {

bool is_latent_member(const ParametricScm& scm, const std::string& node) {
  if (!scm.noise_coupling) return false;
  const auto& members = scm.noise_coupling->members;
  return std::find(members.begin(), members.end(), node) != members.end();
}

std::vector<double> gather_parents(const ParametricScm& scm, const MechanismSpec& m,
                                   const std::vector<double>& values) {
  std::vector<double> pa;
  pa.reserve(m.parents.size());
  for (const auto& p : m.parents) pa.push_back(values[scm.require_index(p)]);
  return pa;
}

}  // namespace

std::vector<double> solve(const ParametricScm& scm, const ExogenousPoint& exo,
                          const ParamBlocks& effective, std::optional<ForcedValue> forced) {
  if (exo.noise.size() != scm.mechanisms.size()) {
    throw ShapeError("exogenous point needs one noise value per node");
  }
  std::vector<double> values(scm.mechanisms.size(), 0.0);
  for (std::size_t i : topological_order(scm)) {
    if (forced && forced->node == i) {
      values[i] = forced->value;
      continue;
    }
    const auto& m = scm.mechanisms[i];
    const double u = exo.noise[i] + (is_latent_member(scm, m.node) ? exo.latent : 0.0);
    values[i] = apply_mechanism(m, gather_parents(scm, m, values), u, effective[i]);
  }
  return values;
}

DistributionTable SampleTable::empirical(const std::vector<std::string>& query) const {
  std::vector<std::size_t> cols;
  for (const auto& q : query) {
    const auto it = std::find(columns.begin(), columns.end(), q);
    if (it == columns.end()) throw ValidationError("unknown column: " + q);
    cols.push_back(static_cast<std::size_t>(it - columns.begin()));
  }
  std::map<DistributionTable::Assignment, double> counts;
  const double weight = 1.0 / static_cast<double>(values.rows());
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    DistributionTable::Assignment a;
    for (std::size_t c : cols) a.push_back(values(r, static_cast<Eigen::Index>(c)));
    counts[a] += weight;
  }
  // Renormalise so rounding in the weights never trips the mass invariant.
  double mass = 0.0;
  for (const auto& [a, p] : counts) mass += p;
  for (auto& [a, p] : counts) p /= mass;
  return DistributionTable::from_atoms(query, counts);
}

namespace {

double draw_noise(const NoiseSpec& u, Rng& rng) {
  switch (u.kind) {
    case NoiseKind::Bernoulli:
      return rng.bernoulli(u.a) ? 1.0 : 0.0;
    case NoiseKind::Uniform:
      return rng.uniform(u.a, u.b);
    case NoiseKind::Gaussian:
      return u.a + u.b * rng.normal();
    case NoiseKind::PointMass:
      return u.a;
  }
  return 0.0;
}

double draw_latent(const LatentCoupling& c, Rng& rng) {
  const double r = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < c.values.size(); ++i) {
    acc += c.probabilities[i];
    if (r < acc) return c.values[i];
  }
  return c.values.back();
}

ExogenousPoint draw_exogenous(const ParametricScm& scm, Rng& rng) {
  ExogenousPoint exo;
  exo.noise.reserve(scm.mechanisms.size());
  if (scm.noise_coupling) exo.latent = draw_latent(*scm.noise_coupling, rng);
  for (const auto& m : scm.mechanisms) exo.noise.push_back(draw_noise(m.noise, rng));
  return exo;
}

}  // namespace

SampleTable simulate(const ParametricScm& scm, std::size_t n, std::uint64_t seed) {
  require_valid(scm);
  if (n == 0) throw ShapeError("simulate: n must be positive");
  SampleTable table;
  table.columns = scm.nodes();
  table.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(scm.mechanisms.size()));
  const ParamBlocks eff = effective_params(scm, stored_params(scm));
  const Rng root(seed);
  for (std::size_t r = 0; r < n; ++r) {
    Rng rng = root.split(r);
    const auto values = solve(scm, draw_exogenous(scm, rng), eff);
    for (std::size_t c = 0; c < values.size(); ++c) {
      table.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = values[c];
    }
  }
  return table;
}

Intervention Intervention::set(std::string node, double value) {
  Intervention iv;
  iv.assignments.emplace(std::move(node), value);
  return iv;
}

ParametricScm intervene(const ParametricScm& scm, const Intervention& iv) {
  require_valid(scm);
  ParametricScm out = scm;
  std::set<std::string> targeted;
  for (const auto& [node, assignment] : iv.assignments) {
    const auto i = scm.index_of(node);
    if (!i) throw ValidationError("intervention on unknown node: " + node);
    targeted.insert(node);
    if (const double* value = std::get_if<double>(&assignment)) {
      MechanismSpec constant;
      constant.node = node;
      constant.primitive = Primitive::Affine;
      constant.params = {*value};
      constant.noise = NoiseSpec::point(0.0);
      out.mechanisms[*i] = constant;
    } else {
      MechanismSpec replacement = std::get<MechanismSpec>(assignment);
      if (replacement.node.empty()) replacement.node = node;
      if (replacement.node != node) {
        throw ValidationError("replacement mechanism names node '" + replacement.node +
                              "' but targets '" + node + "'");
      }
      out.mechanisms[*i] = std::move(replacement);
    }
  }
  std::vector<ParameterCoupling> kept;
  for (auto pc : scm.parameter_couplings) {
    if (targeted.count(pc.node)) continue;
    if (targeted.count(pc.source) && !pc.frozen_source_value) {
      pc.frozen_source_value = scm.mechanism(pc.source).params.at(pc.source_index);
    }
    kept.push_back(pc);
  }
  out.parameter_couplings = std::move(kept);
  if (out.noise_coupling) {
    auto& members = out.noise_coupling->members;
    members.erase(std::remove_if(members.begin(), members.end(),
                                 [&](const std::string& m) { return targeted.count(m) > 0; }),
                  members.end());
  }
  require_valid(out);
  return out;
}

DistributionTable enumerate_joint(const ParametricScm& scm, std::size_t max_cells) {
  require_valid(scm);
  const ParamBlocks eff = effective_params(scm, stored_params(scm));
  const std::size_t n = scm.mechanisms.size();
  // State = (latent value, node values so far); merged after every node so the
  // frontier never exceeds the number of distinct partial assignments.
  using State = std::pair<double, std::vector<double>>;
  std::map<State, double> frontier;
  if (scm.noise_coupling) {
    const auto& c = *scm.noise_coupling;
    for (std::size_t v = 0; v < c.values.size(); ++v) {
      if (c.probabilities[v] > 0.0) frontier[{c.values[v], std::vector<double>(n, 0.0)}] += c.probabilities[v];
    }
  } else {
    frontier[{0.0, std::vector<double>(n, 0.0)}] = 1.0;
  }
  for (std::size_t i : topological_order(scm)) {
    const auto& m = scm.mechanisms[i];
    const bool member = is_latent_member(scm, m.node);
    std::map<State, double> next;
    for (const auto& [state, mass] : frontier) {
      const auto pa = gather_parents(scm, m, state.second);
      std::vector<std::pair<double, double>> outcomes;
      if (m.primitive == Primitive::Cpt) {
        std::size_t row = 0;
        for (double v : pa) row = (row << 1) | static_cast<std::size_t>(as_bit(v));
        const double q = std::clamp(eff[i][row], 0.0, 1.0);
        outcomes = {{1.0, q}, {0.0, 1.0 - q}};
      } else if (m.noise.kind == NoiseKind::Bernoulli) {
        const double shift = member ? state.first : 0.0;
        outcomes = {{apply_mechanism(m, pa, 1.0 + shift, eff[i]), m.noise.a},
                    {apply_mechanism(m, pa, 0.0 + shift, eff[i]), 1.0 - m.noise.a}};
      } else if (m.noise.kind == NoiseKind::PointMass) {
        const double shift = member ? state.first : 0.0;
        outcomes = {{apply_mechanism(m, pa, m.noise.a + shift, eff[i]), 1.0}};
      } else {
        throw UnsupportedModelError("node '" + m.node + "' has continuous noise; exact enumeration needs finite support");
      }
      for (const auto& [value, p] : outcomes) {
        if (p <= 0.0) continue;
        State s = state;
        s.second[i] = value;
        next[s] += mass * p;
      }
    }
    if (next.size() > max_cells) {
      throw CapacityError("joint support exceeds " + std::to_string(max_cells) + " assignments");
    }
    frontier = std::move(next);
  }
  std::map<DistributionTable::Assignment, double> atoms;
  for (const auto& [state, mass] : frontier) atoms[state.second] += mass;
  return DistributionTable::from_atoms(scm.nodes(), atoms, max_cells);
}

DistributionTable interventional_distribution(const ParametricScm& scm, const Intervention& iv,
                                              const std::vector<std::string>& query) {
  return enumerate_joint(intervene(scm, iv)).marginal(query);
}

void check_probe_point(const ParametricScm& scm, const ExogenousPoint& point) {
  if (point.noise.size() != scm.mechanisms.size()) {
    throw ShapeError("probe point needs one noise coordinate per node");
  }
  for (std::size_t i = 0; i < point.noise.size(); ++i) {
    if (!scm.mechanisms[i].noise.contains(point.noise[i])) {
      throw NumericalDomainError("probe coordinate for node '" + scm.mechanisms[i].node +
                                 "' lies outside its noise support");
    }
  }
  if (scm.noise_coupling) {
    const auto& vals = scm.noise_coupling->values;
    if (std::find(vals.begin(), vals.end(), point.latent) == vals.end()) {
      throw NumericalDomainError("probe latent value outside the latent support");
    }
  }
}

std::vector<ExogenousPoint> sample_probe_grid(const ParametricScm& scm, std::size_t count,
                                              std::uint64_t seed) {
  std::vector<ExogenousPoint> grid;
  grid.reserve(count);
  const Rng root(seed);
  for (std::size_t g = 0; g < count; ++g) {
    Rng rng = root.split(g);
    grid.push_back(draw_exogenous(scm, rng));
  }
  return grid;
}

}  // namespace mechdiag
