#include "mechdiag/cap.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "mechdiag/errors.hpp"
#include "mechdiag/rng.hpp"

namespace mechdiag {

SortTranslator SortTranslator::finite(std::map<std::string, std::string> t) {
  SortTranslator s;
  s.kind = Kind::Finite;
  s.table = std::move(t);
  return s;
}

SortTranslator SortTranslator::affine(double slope, double offset) {
  SortTranslator s;
  s.kind = Kind::Affine;
  s.slope = slope;
  s.offset = offset;
  return s;
}

Value SortTranslator::apply(const Value& v) const {
  switch (kind) {
    case Kind::Identity:
      return v;
    case Kind::Finite: {
      if (v.kind != ValueKind::Entity) throw TypeMismatchError("finite translator applied to a non-entity");
      const auto it = table.find(v.entity);
      if (it == table.end()) throw CoverageError("translator does not cover entity '" + v.entity + "'");
      return Value::of_entity(it->second);
    }
    case Kind::Affine:
      if (v.kind != ValueKind::Real) throw TypeMismatchError("affine translator applied to a non-real value");
      return Value::of_real((slope * v.real.array() + offset).matrix());
  }
  return v;
}

std::string AnalogyMap::map_sort(const std::string& sort) const {
  const auto it = sort_map.find(sort);
  return it == sort_map.end() ? sort : it->second;
}

Value AnalogyMap::translate(const std::string& sort, const Value& v) const {
  if (sort.empty() || sort == kBoolSort) return v;
  const auto it = phi.find(sort);
  return it == phi.end() ? v : it->second.apply(v);
}

Term map_term(const std::map<std::string, std::string>& correspondence, const Term& t) {
  Term out = t;
  if (t.kind == Term::Kind::Apply || t.kind == Term::Kind::Relation) {
    const auto it = correspondence.find(t.symbol);
    if (it == correspondence.end()) throw CoverageError("correspondence does not cover symbol '" + t.symbol + "'");
    out.symbol = it->second;
  }
  for (auto& c : out.children) c = map_term(correspondence, c);
  return out;
}

std::vector<std::string> analogy_issues(const AnalogyMap& analogy, const DomainInterpretation& a,
                                        const DomainInterpretation& b, std::uint64_t seed) {
  std::vector<std::string> out;
  for (const auto& [from, to] : analogy.sort_map) {
    if (!a.signature.has_sort(from)) out.push_back("sort_map." + from + ": not a sort of " + a.name);
    if (!b.signature.has_sort(to)) out.push_back("sort_map." + from + ": target sort " + to + " missing in " + b.name);
  }
  for (const auto& [sa, sb] : analogy.correspondence) {
    const std::string where = "correspondence." + sa;
    const auto ia = a.signature.symbols.find(sa);
    const auto ib = b.signature.symbols.find(sb);
    if (ia == a.signature.symbols.end() || ib == b.signature.symbols.end()) {
      out.push_back(where + ": unknown symbol");
      continue;
    }
    const SymbolDecl& da = ia->second;
    const SymbolDecl& db = ib->second;
    if (da.inputs.size() != db.inputs.size()) {
      out.push_back(where + ": arity mismatch");
      continue;
    }
    for (std::size_t i = 0; i < da.inputs.size(); ++i) {
      if (analogy.map_sort(da.inputs[i]) != db.inputs[i]) out.push_back(where + ": input sort mismatch at " + std::to_string(i));
    }
    if (analogy.map_sort(da.output) != db.output) out.push_back(where + ": output sort mismatch");
    if (da.kind != db.kind) out.push_back(where + ": kind mismatch");
  }
  Rng rng(seed, 0x5eed);
  for (const auto& sort : a.signature.sorts) {
    const auto t = analogy.phi.find(sort);
    if (t == analogy.phi.end()) continue;
    const std::string where = "phi." + sort;
    const Carrier& ca = a.carrier(sort);
    const std::string target_sort = analogy.map_sort(sort);
    if (!b.signature.has_sort(target_sort)) continue;
    const Carrier& cb = b.carrier(target_sort);
    const SortTranslator& tr = t->second;
    if (ca.finite) {
      if (tr.kind == SortTranslator::Kind::Affine) {
        out.push_back(where + ": affine translator on a finite sort");
        continue;
      }
      std::set<std::string> images;
      for (const auto& e : ca.entities) {
        std::string img = e;
        if (tr.kind == SortTranslator::Kind::Finite) {
          const auto it = tr.table.find(e);
          if (it == tr.table.end()) {
            out.push_back(where + ": entity '" + e + "' not mapped");
            continue;
          }
          img = it->second;
        }
        if (!images.insert(img).second) out.push_back(where + ": not injective at '" + img + "'");
        if (cb.finite && std::find(cb.entities.begin(), cb.entities.end(), img) == cb.entities.end()) {
          out.push_back(where + ": image '" + img + "' outside " + b.name + " carrier");
        }
      }
      continue;
    }
    if (tr.kind == SortTranslator::Kind::Finite) {
      out.push_back(where + ": finite translator on a real sort");
      continue;
    }
    const double slope = tr.kind == SortTranslator::Kind::Affine ? tr.slope : 1.0;
    if (slope == 0.0) out.push_back(where + ": translator collapses the carrier");
    if (analogy.bilipschitz) {
      const auto [c, big_c] = *analogy.bilipschitz;
      if (!(c > 0 && c <= big_c)) out.push_back("bilipschitz: need 0 < c <= C");
      for (int k = 0; k < 200; ++k) {
        Vec x(ca.dimension()), y(ca.dimension());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
          x(i) = rng.uniform(ca.box.lower(i), ca.box.upper(i));
          y(i) = rng.uniform(ca.box.lower(i), ca.box.upper(i));
        }
        const double din = (x - y).norm();
        if (din == 0.0) continue;
        const double dout = value_distance(tr.apply(Value::of_real(x)), tr.apply(Value::of_real(y)));
        const double ratio = dout / din;
        if (ratio < c * (1 - 1e-9) || ratio > big_c * (1 + 1e-9)) {
          out.push_back(where + ": bi-Lipschitz bounds violated (ratio " + std::to_string(ratio) + ")");
          break;
        }
      }
    }
  }
  return out;
}

namespace {

Vec output_vec(const Value& v) {
  switch (v.kind) {
    case ValueKind::Real:
      return v.real;
    case ValueKind::Truth:
      return Vec::Constant(1, v.truth);
    case ValueKind::Entity:
      break;
  }
  throw TypeMismatchError("entity-valued terms have no parameter Jacobian");
}

InputSet inputs_for(const std::vector<std::string>& sorts, const DomainInterpretation& d, std::size_t n,
                    std::uint64_t seed) {
  if (auto all = exhaustive_inputs(d, sorts, n)) return *all;
  return sample_inputs(d, sorts, n, seed);
}

Vec param_vec(const ParamMap& p, const std::string& owner) {
  const auto it = p.find(owner);
  if (it == p.end()) return Vec();
  return Eigen::Map<const Vec>(it->second.data(), static_cast<Eigen::Index>(it->second.size()));
}

ParamMap with_param(ParamMap p, const std::string& owner, const Vec& theta) {
  p[owner].assign(theta.data(), theta.data() + theta.size());
  return p;
}

}  // namespace

LocalityResult locality_diagnostic(const std::string& sigma, const std::vector<Term>& terms,
                                   const DomainInterpretation& d, std::size_t n_inputs, std::uint64_t seed) {
  if (!d.signature.symbols.count(sigma)) throw ValidationError("unknown symbol: " + sigma);
  LocalityResult r;
  const Vec theta0 = param_vec(d.params, sigma);
  std::size_t evaluated = 0;
  for (std::size_t ti = 0; ti < terms.size(); ++ti) {
    const Term& t = terms[ti];
    const std::string name = render(t);
    if (uses_symbol(t, sigma)) {
      r.notices.push_back("skipped " + name + ": uses " + sigma);
      continue;
    }
    ++evaluated;
    double mean = 0.0;
    if (theta0.size() > 0) {
      const TermSorts sorts = infer_sorts(t, d.signature);
      const InputSet inputs = inputs_for(sorts.inputs, d, n_inputs, Rng(seed).split(ti).next_u64());
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const VectorMap f = [&](const Vec& theta) {
          Rng rng = Rng(seed, 1).split(i);
          return output_vec(evaluate(t, d, inputs[i], with_param(d.params, sigma, theta), &rng));
        };
        mean += jacobian(f, theta0).squaredNorm();
      }
      mean /= static_cast<double>(std::max<std::size_t>(1, inputs.size()));
    }
    r.per_term.emplace_back(name, mean);
    r.aggregate = std::max(r.aggregate, mean);
  }
  r.vacuous = evaluated == 0;
  if (r.vacuous) r.notices.push_back("vacuous: no term omits " + sigma);
  return r;
}

namespace {

std::vector<std::string> law_input_sorts(const Law& law, const Signature& sig) {
  const TermSorts l = infer_sorts(law.left, sig);
  const TermSorts r = infer_sorts(law.right, sig);
  if (!l.output.empty() && !r.output.empty() && l.output != r.output) {
    throw TypeMismatchError("law " + law.name + ": sides have sorts " + l.output + " and " + r.output);
  }
  std::vector<std::string> sorts = l.inputs.size() >= r.inputs.size() ? l.inputs : r.inputs;
  const auto& shorter = l.inputs.size() >= r.inputs.size() ? r.inputs : l.inputs;
  for (std::size_t i = 0; i < shorter.size(); ++i) {
    if (shorter[i].empty()) continue;
    if (sorts[i].empty()) {
      sorts[i] = shorter[i];
    } else if (sorts[i] != shorter[i]) {
      throw TypeMismatchError("law " + law.name + ": slot $" + std::to_string(i) + " has two sorts");
    }
  }
  return sorts;
}

double law_error(const Law& law, const DomainInterpretation& d, const InputSet& inputs, const ParamMap& params,
                 std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Rng rl = Rng(seed, 2).split(i);
    Rng rr = Rng(seed, 2).split(i);
    total += value_distance(evaluate(law.left, d, inputs[i], params, &rl),
                            evaluate(law.right, d, inputs[i], params, &rr));
  }
  return inputs.empty() ? 0.0 : total / static_cast<double>(inputs.size());
}

}  // namespace

LawResidualResult law_residual(const std::vector<Law>& laws, const DomainInterpretation& d, std::size_t n_inputs,
                               std::uint64_t seed) {
  LawResidualResult r;
  for (const auto& [name, decl] : d.signature.symbols) {
    if (decl.param_arity > 0) r.symbols.push_back(name);
  }
  r.insensitivity = Mat::Constant(static_cast<Eigen::Index>(laws.size()), static_cast<Eigen::Index>(r.symbols.size()),
                                  std::numeric_limits<double>::quiet_NaN());
  for (std::size_t l = 0; l < laws.size(); ++l) {
    const Law& law = laws[l];
    if (!(law.weight > 0)) throw ValidationError("law " + law.name + ": weight must be positive");
    const InputSet inputs = inputs_for(law_input_sorts(law, d.signature), d, n_inputs, Rng(seed).split(l).next_u64());
    const double e = law_error(law, d, inputs, d.params, seed);
    r.residuals.push_back(e);
    r.quadratic_total += law.weight * e * e;
    for (std::size_t s = 0; s < r.symbols.size(); ++s) {
      const std::string& sym = r.symbols[s];
      if (uses_symbol(law.left, sym) || uses_symbol(law.right, sym)) continue;
      const Vec theta0 = param_vec(d.params, sym);
      double g = 0.0;
      if (theta0.size() > 0) {
        const ScalarMap f = [&](const Vec& theta) {
          return law_error(law, d, inputs, with_param(d.params, sym, theta), seed);
        };
        g = gradient(f, theta0).norm();
      }
      r.insensitivity(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(s)) = g;
      r.max_insensitivity = std::max(r.max_insensitivity, g);
    }
  }
  return r;
}

InputSet analogy_inputs(const Term& t, const DomainInterpretation& a, std::size_t n_inputs, std::uint64_t seed) {
  return inputs_for(infer_sorts(t, a.signature).inputs, a, n_inputs, seed);
}

double analogy_residual(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                        const DomainInterpretation& b, const InputSet& inputs, std::uint64_t seed) {
  const Term mapped = map_term(analogy.correspondence, t);
  const TermSorts sorts = infer_sorts(t, a.signature);
  infer_sorts(mapped, b.signature);
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Value> translated;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      translated.push_back(analogy.translate(k < sorts.inputs.size() ? sorts.inputs[k] : "", inputs[i][k]));
    }
    Rng ra = Rng(seed, 3).split(i);
    Rng rb = Rng(seed, 3).split(i);
    const Value left = analogy.translate(sorts.output, evaluate(t, a, inputs[i], &ra));
    total += value_distance(left, evaluate(mapped, b, translated, &rb));
  }
  return inputs.empty() ? 0.0 : total / static_cast<double>(inputs.size());
}

double analogy_residual(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                        const DomainInterpretation& b, std::size_t n_inputs, std::uint64_t seed) {
  return analogy_residual(t, analogy, a, b, analogy_inputs(t, a, n_inputs, seed), seed);
}

double composite_constant(double max_lipschitz, std::size_t max_arity, std::size_t depth) {
  return std::pow(max_lipschitz, static_cast<double>(depth)) *
         std::pow(static_cast<double>(max_arity), static_cast<double>(depth));
}

double empirical_lipschitz(const std::string& symbol, const DomainInterpretation& d, std::size_t pairs,
                           std::uint64_t seed) {
  const SymbolDecl& decl = d.signature.require(symbol);
  const LibraryPrimitive* lib = find_library_primitive(decl.implementation);
  Term t;
  if (lib && lib->relational) {
    t = Term::relation(symbol);
  } else {
    std::vector<Term> slots;
    for (std::size_t i = 0; i < decl.inputs.size(); ++i) slots.push_back(Term::make_slot(i));
    t = Term::apply(symbol, std::move(slots));
  }
  const InputSet xs = sample_inputs(d, decl.inputs, pairs, seed);
  const InputSet ys = sample_inputs(d, decl.inputs, pairs, seed ^ 0x9e3779b97f4a7c15ULL);
  double best = 0.0;
  for (std::size_t i = 0; i < pairs; ++i) {
    double din2 = 0.0;
    for (std::size_t k = 0; k < decl.inputs.size(); ++k) {
      const double dk = value_distance(xs[i][k], ys[i][k]);
      din2 += dk * dk;
    }
    if (din2 <= 1e-24) continue;
    Rng rx = Rng(seed, 4).split(i);
    Rng ry = Rng(seed, 4).split(i);
    const double dout = value_distance(evaluate(t, d, xs[i], &rx), evaluate(t, d, ys[i], &ry));
    best = std::max(best, dout / std::sqrt(din2));
  }
  return best;
}

GeneralizationResult generalization_check(double eps_loc, double eps_law, double eps_ana,
                                          const std::map<std::string, double>& lipschitz,
                                          const std::vector<Term>& composites, const AnalogyMap& analogy,
                                          const DomainInterpretation& a, const DomainInterpretation& b,
                                          std::size_t n_inputs, std::uint64_t seed) {
  GeneralizationResult r;
  r.epsilon_sum = eps_loc + eps_law + eps_ana;
  r.max_arity = std::max<std::size_t>(1, a.signature.max_arity());
  std::set<std::string> used;
  for (const auto& t : composites) {
    for (const auto& s : symbols_of(t)) used.insert(s);
  }
  for (const auto& s : used) {
    const auto it = lipschitz.find(s);
    if (it == lipschitz.end()) throw ValidationError("missing Lipschitz constant for symbol " + s);
  }
  for (const auto& [s, l] : lipschitz) {
    if (!(l >= 0)) throw ValidationError("Lipschitz constant for " + s + " must be nonnegative");
    r.max_lipschitz = std::max(r.max_lipschitz, l);
  }
  std::size_t k = 0;
  for (const auto& s : used) {
    const double observed = empirical_lipschitz(s, a, 1000, Rng(seed, 5).split(k++).next_u64());
    r.observed_lipschitz[s] = observed;
    if (lipschitz.at(s) < observed * (1 - 1e-9)) {
      r.inconsistent_symbols.push_back(s);
      r.lipschitz_consistent = false;
    }
  }
  for (std::size_t i = 0; i < composites.size(); ++i) {
    CompositeResidual c;
    c.term = render(composites[i]);
    c.depth = depth(composites[i]);
    c.measured = analogy_residual(composites[i], analogy, a, b, n_inputs, Rng(seed, 6).split(i).next_u64());
    c.bound = composite_constant(r.max_lipschitz, r.max_arity, c.depth) * r.epsilon_sum;
    if (!(c.measured <= c.bound)) ++r.violations;
    r.composites.push_back(std::move(c));
  }
  r.passed = r.violations == 0 && r.lipschitz_consistent;
  return r;
}

namespace {

double rbf(const Vec& x, const Vec& y, double h) { return std::exp(-(x - y).squaredNorm() / (2 * h * h)); }

}  // namespace

double mmd2_unbiased(const std::vector<Vec>& xs, const std::vector<Vec>& ys, double bandwidth) {
  const std::size_t m = xs.size();
  const std::size_t n = ys.size();
  if (m < 2 || n < 2) throw PreconditionError("MMD needs at least two samples per side");
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) kxx += 2 * rbf(xs[i], xs[j], bandwidth);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) kyy += 2 * rbf(ys[i], ys[j], bandwidth);
  }
  for (const auto& x : xs) {
    for (const auto& y : ys) kxy += rbf(x, y, bandwidth);
  }
  const double dm = static_cast<double>(m), dn = static_cast<double>(n);
  return kxx / (dm * (dm - 1)) + kyy / (dn * (dn - 1)) - 2 * kxy / (dm * dn);
}

double median_bandwidth(const std::vector<Vec>& xs, const std::vector<Vec>& ys) {
  std::vector<const Vec*> pool;
  for (const auto& x : xs) pool.push_back(&x);
  for (const auto& y : ys) pool.push_back(&y);
  std::vector<double> dist;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t j = i + 1; j < pool.size(); ++j) {
      const double d = (*pool[i] - *pool[j]).norm();
      if (d > 0) dist.push_back(d);
    }
  }
  if (dist.empty()) return 1.0;
  const auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
  std::nth_element(dist.begin(), mid, dist.end());
  return *mid;
}

StochasticResult stochastic_residual(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                                     const DomainInterpretation& b, std::size_t n_inputs, std::size_t n_samples,
                                     std::uint64_t seed) {
  if (n_samples < 50) throw PreconditionError("stochastic residual needs at least 50 samples per input");
  if (!is_stochastic(t, a.signature)) throw PreconditionError("term has no stochastic primitive: " + render(t));
  const Term mapped = map_term(analogy.correspondence, t);
  const TermSorts sorts = infer_sorts(t, a.signature);
  const InputSet inputs = analogy_inputs(t, a, n_inputs, seed);
  StochasticResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Value> translated;
    for (std::size_t k = 0; k < inputs[i].size(); ++k) {
      translated.push_back(analogy.translate(k < sorts.inputs.size() ? sorts.inputs[k] : "", inputs[i][k]));
    }
    const Rng base = Rng(seed, 7).split(i);
    std::vector<Vec> xs, ys;
    for (std::size_t j = 0; j < n_samples; ++j) {
      Rng ra = base.split(2 * j);
      Rng rb = base.split(2 * j + 1);
      xs.push_back(output_vec(analogy.translate(sorts.output, evaluate(t, a, inputs[i], &ra))));
      ys.push_back(output_vec(evaluate(mapped, b, translated, &rb)));
    }
    r.per_input.push_back(mmd2_unbiased(xs, ys, median_bandwidth(xs, ys)));
  }
  const double n = static_cast<double>(r.per_input.size());
  for (double v : r.per_input) r.mean += v / n;
  if (r.per_input.size() > 1) {
    double var = 0.0;
    for (double v : r.per_input) var += (v - r.mean) * (v - r.mean);
    r.standard_error = std::sqrt(var / (n - 1) / n);
  }
  return r;
}

SpuriousAnalogyFinding detect_spurious_analogy(double law_total, double primitive_residual, double law_threshold,
                                               double residual_threshold) {
  return {law_total > law_threshold && primitive_residual <= residual_threshold, law_total, primitive_residual};
}

NonUseCouplingFinding detect_non_use_coupling(const std::map<std::string, LocalityResult>& by_symbol,
                                              double threshold) {
  NonUseCouplingFinding f;
  for (const auto& [sym, res] : by_symbol) {
    if (f.symbol.empty() || res.aggregate > f.epsilon_loc) {
      f.epsilon_loc = res.aggregate;
      f.symbol = sym;
    }
  }
  f.fired = f.epsilon_loc > threshold;
  return f;
}

namespace {

DomainInterpretation with_params(const DomainInterpretation& d, const ParamMap& overrides) {
  DomainInterpretation out = d;
  for (const auto& [k, v] : overrides) out.params[k] = v;
  return out;
}

}  // namespace

DriftFinding detect_drift(const Term& t, const AnalogyMap& analogy, const DomainInterpretation& a,
                          const DomainInterpretation& b, const std::vector<TrajectorySnapshot>& trajectory,
                          std::size_t n_inputs, std::uint64_t seed, double rise_threshold, double flat_threshold) {
  DriftFinding f;
  if (trajectory.empty()) return f;
  const InputSet inputs = analogy_inputs(t, a, n_inputs, seed);
  double lo = trajectory.front().loss, hi = lo;
  for (const auto& snap : trajectory) {
    f.residuals.push_back(
        analogy_residual(t, analogy, with_params(a, snap.params_a), with_params(b, snap.params_b), inputs, seed));
    lo = std::min(lo, snap.loss);
    hi = std::max(hi, snap.loss);
  }
  f.residual_rise = f.residuals.back() - f.residuals.front();
  f.loss_spread = hi - lo;
  f.fired = f.residual_rise >= rise_threshold && f.loss_spread <= flat_threshold;
  return f;
}

}  // namespace mechdiag
