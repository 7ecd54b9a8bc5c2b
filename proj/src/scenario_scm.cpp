#include <algorithm>
#include <cmath>
#include <set>

#include "mechdiag/errors.hpp"
#include "mechdiag/lap_icm.hpp"
#include "mechdiag/scm.hpp"
#include "scenario_internal.hpp"

namespace mechdiag::detail {

namespace {

NoiseSpec read_noise(Reader& r, const Json& j, const std::string& path) {
  if (!r.object(j, path)) return {};
  const std::string kind = r.string(j, "kind", path, std::nullopt);
  if (kind == "bernoulli") {
    r.keys(j, path, {"kind", "p"});
    return NoiseSpec::bernoulli(r.number(j, "p", path, std::nullopt));
  }
  if (kind == "uniform") {
    r.keys(j, path, {"kind", "low", "high"});
    return NoiseSpec::uniform(r.number(j, "low", path, 0.0), r.number(j, "high", path, 1.0));
  }
  if (kind == "gaussian") {
    r.keys(j, path, {"kind", "mean", "sd"});
    return NoiseSpec::gaussian(r.number(j, "mean", path, 0.0), r.number(j, "sd", path, 1.0));
  }
  if (kind == "point") {
    r.keys(j, path, {"kind", "value"});
    return NoiseSpec::point(r.number(j, "value", path, 0.0));
  }
  if (j.contains("kind")) r.fail(Reader::at(path, "kind"), "unknown noise kind '" + kind + "'");
  return {};
}

ParametricScm read_scm(Reader& r, const Json& j, const std::string& path) {
  ParametricScm scm;
  if (!r.object(j, path)) return scm;
  r.keys(j, path, {"mode", "mechanisms", "latent", "couplings"});
  const std::size_t before = r.issues.size();
  const std::string mode = r.string(j, "mode", path, "markovian");
  if (mode == "semi-markovian") {
    scm.mode = ScmMode::SemiMarkovian;
  } else if (mode != "markovian") {
    r.fail(Reader::at(path, "mode"), "expected markovian or semi-markovian");
  }
  if (const Json* mechs = r.require(j, "mechanisms", path); mechs && r.array(*mechs, Reader::at(path, "mechanisms"))) {
    for (std::size_t i = 0; i < mechs->size(); ++i) {
      const Json& m = (*mechs)[i];
      const std::string mp = Reader::at(Reader::at(path, "mechanisms"), i);
      if (!r.object(m, mp)) continue;
      r.keys(m, mp, {"node", "parents", "primitive", "params", "noise", "hidden_width"});
      MechanismSpec spec;
      spec.node = r.string(m, "node", mp, std::nullopt);
      spec.parents = r.strings(m, "parents", mp, std::vector<std::string>{});
      const std::string prim = r.string(m, "primitive", mp, std::nullopt);
      if (const auto p = primitive_from_name(prim)) {
        spec.primitive = *p;
      } else if (m.contains("primitive") && m["primitive"].is_string()) {
        r.fail(Reader::at(mp, "primitive"), "unknown primitive '" + prim + "'");
      }
      spec.params = r.numbers(m, "params", mp, std::vector<double>{});
      if (const Json* n = r.find(m, "noise")) {
        spec.noise = read_noise(r, *n, Reader::at(mp, "noise"));
      } else {
        spec.noise = NoiseSpec::point(0.0);
      }
      spec.hidden_width = static_cast<std::size_t>(r.integer(m, "hidden_width", mp, 0));
      scm.mechanisms.push_back(std::move(spec));
    }
  }
  if (const Json* l = r.find(j, "latent")) {
    const std::string lp = Reader::at(path, "latent");
    if (r.object(*l, lp)) {
      r.keys(*l, lp, {"name", "values", "probabilities", "members"});
      LatentCoupling lc;
      lc.name = r.string(*l, "name", lp, std::nullopt);
      lc.values = r.numbers(*l, "values", lp, std::nullopt);
      lc.probabilities = r.numbers(*l, "probabilities", lp, std::nullopt);
      lc.members = r.strings(*l, "members", lp, std::nullopt);
      scm.noise_coupling = std::move(lc);
      scm.mode = ScmMode::SemiMarkovian;
    }
  }
  if (const Json* cs = r.find(j, "couplings"); cs && r.array(*cs, Reader::at(path, "couplings"))) {
    for (std::size_t i = 0; i < cs->size(); ++i) {
      const Json& c = (*cs)[i];
      const std::string cp = Reader::at(Reader::at(path, "couplings"), i);
      if (!r.object(c, cp)) continue;
      r.keys(c, cp, {"node", "index", "source", "source_index", "gain"});
      ParameterCoupling pc;
      pc.node = r.string(c, "node", cp, std::nullopt);
      pc.index = static_cast<std::size_t>(r.integer(c, "index", cp, std::nullopt));
      pc.source = r.string(c, "source", cp, std::nullopt);
      pc.source_index = static_cast<std::size_t>(r.integer(c, "source_index", cp, std::nullopt));
      pc.gain = r.number(c, "gain", cp, 1.0);
      scm.parameter_couplings.push_back(pc);
    }
  }
  if (r.issues.size() == before) {
    for (const auto& v : validate(scm).violations) {
      std::string where = path;
      if (const auto idx = scm.index_of(v.node)) where = Reader::at(Reader::at(path, "mechanisms"), *idx);
      r.fail(where, v.code + ": " + v.message);
    }
  }
  return scm;
}

std::vector<std::pair<std::string, std::string>> read_pairs(Reader& r, const Json& obj, const std::string& key,
                                                            const std::string& path, const ParametricScm& scm) {
  std::vector<std::pair<std::string, std::string>> out;
  const Json* j = r.find(obj, key);
  if (!j) return out;
  const std::string p = Reader::at(path, key);
  if (!r.array(*j, p)) return out;
  for (std::size_t i = 0; i < j->size(); ++i) {
    const Json& e = (*j)[i];
    const std::string ep = Reader::at(p, i);
    if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_string()) {
      r.fail(ep, "expected [source, target]");
      continue;
    }
    const auto s = e[0].get<std::string>(), t = e[1].get<std::string>();
    if (!scm.index_of(s) || !scm.index_of(t)) r.fail(ep, "unknown node");
    out.emplace_back(s, t);
  }
  return out;
}

struct IcmEntry {
  std::string node;
  std::size_t samples = 100000;
  std::string expect;
  std::vector<std::string> observed;
};

struct InterventionEntry {
  std::map<std::string, double> set;
  std::map<std::string, double> event;
  double expected = 0.0;
};

struct ScmPayload {
  ParametricScm scm;
  std::size_t probe_points = 16;
  std::vector<std::pair<std::string, std::string>> leaks;
  std::vector<std::pair<std::string, std::string>> descendant_gain;
  std::vector<IcmEntry> icm;
  std::vector<InterventionEntry> interventions;
};

std::map<std::string, double> read_assignment(Reader& r, const Json& obj, const std::string& key,
                                              const std::string& path, const ParametricScm& scm) {
  std::map<std::string, double> out;
  const Json* j = r.require(obj, key, path);
  if (!j || !r.object(*j, Reader::at(path, key))) return out;
  for (const auto& [node, v] : j->items()) {
    const std::string p = Reader::at(Reader::at(path, key), node);
    if (!scm.index_of(node)) r.fail(p, "unknown node");
    out[node] = r.number_value(v, p);
  }
  return out;
}

ScmPayload read_scm_payload(Reader& r, const Json& j) {
  const std::string path = "$.payload";
  ScmPayload p;
  r.keys(j, path, {"model", "probe_points", "lap", "icm", "interventions"});
  if (const Json* m = r.require(j, "model", path)) p.scm = read_scm(r, *m, "$.payload.model");
  p.probe_points = static_cast<std::size_t>(r.integer(j, "probe_points", path, 16, 1));
  if (const Json* lap = r.find(j, "lap"); lap && r.object(*lap, "$.payload.lap")) {
    r.keys(*lap, "$.payload.lap", {"declared_leaks", "descendant_gain"});
    p.leaks = read_pairs(r, *lap, "declared_leaks", "$.payload.lap", p.scm);
    p.descendant_gain = read_pairs(r, *lap, "descendant_gain", "$.payload.lap", p.scm);
  }
  if (const Json* icm = r.find(j, "icm"); icm && r.array(*icm, "$.payload.icm")) {
    for (std::size_t i = 0; i < icm->size(); ++i) {
      const std::string ip = Reader::at("$.payload.icm", i);
      const Json& e = (*icm)[i];
      if (!r.object(e, ip)) continue;
      r.keys(e, ip, {"node", "samples", "expect", "observed"});
      IcmEntry entry;
      entry.node = r.string(e, "node", ip, std::nullopt);
      entry.samples = static_cast<std::size_t>(r.integer(e, "samples", ip, 100000, 10));
      entry.expect = r.string(e, "expect", ip, "separable");
      entry.observed = r.strings(e, "observed", ip, std::vector<std::string>{});
      if (entry.expect != "separable" && entry.expect != "coupled") {
        r.fail(Reader::at(ip, "expect"), "expected separable or coupled");
      }
      if (const auto idx = p.scm.index_of(entry.node)) {
        if (p.scm.mechanisms[*idx].parents.empty()) r.fail(Reader::at(ip, "node"), "node has no parents");
      } else if (!entry.node.empty()) {
        r.fail(Reader::at(ip, "node"), "unknown node");
      }
      for (const auto& o : entry.observed) {
        if (!p.scm.index_of(o)) r.fail(Reader::at(ip, "observed"), "unknown node " + o);
      }
      p.icm.push_back(std::move(entry));
    }
  }
  if (const Json* iv = r.find(j, "interventions"); iv && r.array(*iv, "$.payload.interventions")) {
    for (std::size_t i = 0; i < iv->size(); ++i) {
      const std::string ip = Reader::at("$.payload.interventions", i);
      const Json& e = (*iv)[i];
      if (!r.object(e, ip)) continue;
      r.keys(e, ip, {"set", "event", "expected"});
      InterventionEntry entry;
      entry.set = read_assignment(r, e, "set", ip, p.scm);
      entry.event = read_assignment(r, e, "event", ip, p.scm);
      entry.expected = r.number(e, "expected", ip, std::nullopt);
      p.interventions.push_back(std::move(entry));
    }
  }
  return p;
}

std::string pair_name(const std::string& s, const std::string& t) { return s + "->" + t; }

}  // namespace

void check_scm_payload(Reader& r, const Json& payload) { read_scm_payload(r, payload); }

DiagnosticReport run_scm_payload(const Json& payload, const KindContext& ctx) {
  Reader r;
  const ScmPayload p = read_scm_payload(r, payload);
  require_clean(r);
  const Tolerances& tol = ctx.tolerances;
  DiagnosticReport rep;
  if (p.scm.noise_coupling) {
    std::string members;
    for (const auto& m : p.scm.noise_coupling->members) members += (members.empty() ? "" : ", ") + m;
    rep.notes.push_back("semi-markovian: bidirected edges rendered as shared discrete latent " +
                        p.scm.noise_coupling->name + " over {" + members + "}");
  }
  const auto grid = sample_probe_grid(p.scm, p.probe_points, ctx.seed);
  const auto sweep = lap_sweep(p.scm, grid, tol.get("lap_zero", kStructuralZeroTol));
  Table& lap = rep.add_table("lap", {"source", "target", "descendant", "blocks_disjoint", "locality", "autonomy"});
  const auto is_leak = [&](const std::string& s, const std::string& t) {
    return std::find(p.leaks.begin(), p.leaks.end(), std::make_pair(s, t)) != p.leaks.end();
  };
  double zero_max = 0.0;
  std::size_t zero_pairs = 0;
  for (const auto& w : sweep) {
    const bool disjoint = parameter_blocks_disjoint(p.scm, w.source, w.target);
    lap.rows.push_back({w.source, w.target, w.descendant, disjoint, w.locality_residual, w.autonomy_residual});
    if (!w.descendant && disjoint && !is_leak(w.source, w.target)) {
      zero_max = std::max({zero_max, w.locality_residual, w.autonomy_residual});
      ++zero_pairs;
    }
  }
  rep.add_check("lap_nondescendant_max", "lap/non-descendant-invariance", "lap_zero", zero_max, tol,
                kStructuralZeroTol, Comparison::AtMost);
  rep.notes.push_back("lap: " + std::to_string(zero_pairs) + " non-descendant pairs with disjoint blocks over " +
                      std::to_string(grid.size()) + " probe points");
  const auto find = [&](const std::string& s, const std::string& t) -> const LapReport& {
    for (const auto& w : sweep) {
      if (w.source == s && w.target == t) return w;
    }
    throw ValidationError("pair not in sweep: " + pair_name(s, t));
  };
  for (const auto& [s, t] : p.leaks) {
    const auto& w = find(s, t);
    rep.add_check("lap_leak[" + pair_name(s, t) + "]", "lap/declared-leak", "lap_leak",
                  std::max(w.locality_residual, w.autonomy_residual), tol, 0.01, Comparison::AtLeast);
  }
  for (const auto& [s, t] : p.descendant_gain) {
    rep.add_check("lap_descendant[" + pair_name(s, t) + "]", "lap/descendant-responds", "lap_leak",
                  find(s, t).locality_residual, tol, 0.01, Comparison::AtLeast);
  }
  if (!p.icm.empty()) {
    Table& icm = rep.add_table("icm", {"node", "parent_dim", "child_dim", "offblock_ratio", "bracket_witness",
                                       "structural_residual", "samples"});
    for (std::size_t k = 0; k < p.icm.size(); ++k) {
      const auto& e = p.icm[k];
      IcmOptions opt;
      opt.samples = e.samples;
      opt.seed = ctx.seed + 1000003ULL * (k + 1);
      if (!e.observed.empty()) opt.metric = fisher_metric_source(e.observed);
      const IcmReport ir = icm_witness(p.scm, e.node, grid, opt);
      icm.rows.push_back({e.node, ir.parent_dim, ir.child_dim, ir.offblock_ratio, ir.bracket_witness,
                          ir.structural_residual, e.samples});
      if (e.expect == "separable") {
        rep.add_check("icm_offblock[" + e.node + "]", "icm/block-diagonal-metric", "icm_offblock", ir.offblock_ratio,
                      tol, kOffblockTol, Comparison::AtMost);
        rep.add_check("icm_structural[" + e.node + "]", "icm/structural-independence", "lap_zero",
                      ir.structural_residual, tol, kStructuralZeroTol, Comparison::AtMost);
      } else {
        rep.add_check("icm_offblock[" + e.node + "]", "icm/coupled-metric", "icm_coupled", ir.offblock_ratio, tol,
                      0.4, Comparison::AtLeast);
      }
      rep.add_check("icm_bracket[" + e.node + "]", "icm/commuting-flows", "bracket_zero", ir.bracket_witness, tol,
                    1e-8, Comparison::AtMost);
      Table& metric = rep.add_table("metric_" + e.node, {"row", "values"});
      for (Eigen::Index i = 0; i < ir.metric.matrix.rows(); ++i) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < ir.metric.matrix.cols(); ++c) row.push_back(ir.metric.matrix(i, c));
        metric.rows.push_back({static_cast<std::int64_t>(i), row});
      }
    }
  }
  if (!p.interventions.empty()) {
    Table& dt = rep.add_table("interventions", {"set", "event", "probability", "expected"});
    for (std::size_t k = 0; k < p.interventions.size(); ++k) {
      const auto& e = p.interventions[k];
      Intervention iv;
      std::string set_text, event_text;
      for (const auto& [n, v] : e.set) {
        iv.assignments[n] = v;
        set_text += (set_text.empty() ? "" : ",") + n + "=" + Json(v).dump();
      }
      std::vector<std::string> query;
      DistributionTable::Assignment at;
      for (const auto& [n, v] : e.event) {
        query.push_back(n);
        at.push_back(v);
        event_text += (event_text.empty() ? "" : ",") + n + "=" + Json(v).dump();
      }
      const double prob = interventional_distribution(p.scm, iv, query).probability(at);
      dt.rows.push_back({set_text, event_text, prob, e.expected});
      rep.add_check("do[" + std::to_string(k) + "]", "scm/interventional-law", "do_exact", std::abs(prob - e.expected),
                    tol, 1e-12, Comparison::AtMost);
    }
  }
  return rep;
}

namespace {

ObsEquivalenceConfig read_obs(Reader& r, const Json& j, std::vector<double>& expected) {
  r.keys(j, "$.payload", {"noise", "p", "intervention_value", "min_gap", "expected_do"});
  ObsEquivalenceConfig c;
  c.noise = r.number(j, "noise", "$.payload", c.noise);
  c.p = r.number(j, "p", "$.payload", c.p);
  c.intervention_value = r.number(j, "intervention_value", "$.payload", c.intervention_value);
  c.min_gap = r.number(j, "min_gap", "$.payload", c.min_gap);
  expected = r.numbers(j, "expected_do", "$.payload", std::vector<double>{});
  if (!(c.noise >= 0 && c.noise <= 1)) r.fail("$.payload.noise", "must lie in [0, 1]");
  if (!(c.p >= 0 && c.p <= 1)) r.fail("$.payload.p", "must lie in [0, 1]");
  if (c.intervention_value != 0.0 && c.intervention_value != 1.0) {
    r.fail("$.payload.intervention_value", "must be 0 or 1");
  }
  if (!expected.empty() && expected.size() != 3) r.fail("$.payload.expected_do", "expected three values");
  return c;
}

}  // namespace

void check_obs_payload(Reader& r, const Json& payload) {
  std::vector<double> expected;
  read_obs(r, payload, expected);
}

DiagnosticReport run_obs_payload(const Json& payload, const KindContext& ctx) {
  Reader r;
  std::vector<double> expected;
  const ObsEquivalenceConfig c = read_obs(r, payload, expected);
  require_clean(r);
  ObsEquivalenceResult res = obs_equivalence_demo(c, ctx.tolerances);
  if (!expected.empty()) {
    double worst = 0.0;
    for (std::size_t i = 0; i < 3; ++i) worst = std::max(worst, std::abs(res.do_answers[i] - expected[i]));
    res.report.add_check("do_answers_expected", "obs-equivalence/do-values", "do_exact", worst, ctx.tolerances, 1e-12,
                         Comparison::AtMost);
  }
  return res.report;
}

namespace {

struct BayesPayload {
  std::vector<CoinHypothesis> hypotheses;
  std::vector<double> prior;
  SurgeryFamily a = SurgeryFamily::CutParent;
  SurgeryFamily b = SurgeryFamily::CutChild;
  std::vector<Observation> data;
  BayesSurgeryConfig config;
};

SurgeryFamily read_family(Reader& r, const Json& j, const std::string& key, SurgeryFamily fallback) {
  const std::string name = r.string(j, key, "$.payload", surgery_family_name(fallback));
  if (const auto f = surgery_family_from_name(name)) return *f;
  r.fail("$.payload." + key, "unknown surgery family '" + name + "'");
  return fallback;
}

BayesPayload read_bayes(Reader& r, const Json& j) {
  BayesPayload p;
  r.keys(j, "$.payload", {"hypotheses", "prior", "family_a", "family_b", "data", "counts", "intervention_value", "min_gap"});
  if (const Json* hs = r.require(j, "hypotheses", "$.payload"); hs && r.array(*hs, "$.payload.hypotheses")) {
    for (std::size_t i = 0; i < hs->size(); ++i) {
      const std::string hp = Reader::at("$.payload.hypotheses", i);
      if (!r.object((*hs)[i], hp)) continue;
      r.keys((*hs)[i], hp, {"name", "p_x", "noise"});
      CoinHypothesis h;
      h.name = r.string((*hs)[i], "name", hp, "h" + std::to_string(i));
      h.p_x = r.number((*hs)[i], "p_x", hp, std::nullopt);
      h.noise = r.number((*hs)[i], "noise", hp, std::nullopt);
      p.hypotheses.push_back(h);
    }
  }
  p.prior = r.numbers(j, "prior", "$.payload", std::nullopt);
  p.a = read_family(r, j, "family_a", SurgeryFamily::CutParent);
  p.b = read_family(r, j, "family_b", SurgeryFamily::CutChild);
  const auto bit = [&](const Json& v, const std::string& path) {
    const double x = r.number_value(v, path);
    if (x != 0.0 && x != 1.0) r.fail(path, "expected 0 or 1");
    return static_cast<int>(x);
  };
  if (const Json* d = r.find(j, "data"); d && r.array(*d, "$.payload.data")) {
    for (std::size_t i = 0; i < d->size(); ++i) {
      const std::string dp = Reader::at("$.payload.data", i);
      const Json& e = (*d)[i];
      if (!e.is_array() || e.size() != 2) {
        r.fail(dp, "expected [x, y]");
        continue;
      }
      p.data.push_back({bit(e[0], dp + "[0]"), bit(e[1], dp + "[1]")});
    }
  }
  if (const Json* c = r.find(j, "counts"); c && r.array(*c, "$.payload.counts")) {
    for (std::size_t i = 0; i < c->size(); ++i) {
      const std::string cp = Reader::at("$.payload.counts", i);
      const Json& e = (*c)[i];
      if (!r.object(e, cp)) continue;
      r.keys(e, cp, {"x", "y", "n"});
      const int x = e.contains("x") ? bit(e["x"], cp + ".x") : 0;
      const int y = e.contains("y") ? bit(e["y"], cp + ".y") : 0;
      const auto n = r.integer(e, "n", cp, std::nullopt);
      for (std::int64_t k = 0; k < n; ++k) p.data.push_back({x, y});
    }
  }
  p.config.intervention_value = r.number(j, "intervention_value", "$.payload", 1.0);
  p.config.min_gap = r.number(j, "min_gap", "$.payload", 0.1);
  if (!p.hypotheses.empty() && p.prior.size() != p.hypotheses.size()) {
    r.fail("$.payload.prior", "needs one weight per hypothesis");
  }
  return p;
}

}  // namespace

void check_bayes_payload(Reader& r, const Json& payload) { read_bayes(r, payload); }

DiagnosticReport run_bayes_payload(const Json& payload, const KindContext& ctx) {
  Reader r;
  const BayesPayload p = read_bayes(r, payload);
  require_clean(r);
  return bayes_surgery_demo(p.hypotheses, p.prior, p.a, p.b, p.data, p.config, ctx.tolerances).report;
}

}  // namespace mechdiag::detail
