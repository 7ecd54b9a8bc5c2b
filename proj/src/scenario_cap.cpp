#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "mechdiag/cap.hpp"
#include "mechdiag/errors.hpp"
#include "scenario_internal.hpp"

namespace mechdiag::detail {

namespace {

struct Expectation {
  std::string name;
  Term term;
  std::string domain = "A";
  std::vector<Json> inputs;
  Json expected;
};

struct ResidualItem {
  Term term;
  std::optional<std::vector<Json>> inputs;
  std::size_t n_inputs = 200;
  bool at_least = false;
  std::string tolerance_key;
  double threshold = 0.0;
};

struct LocalityItem {
  std::string symbol;
  std::vector<Term> terms;
  std::size_t n_inputs = 200;
  bool coupled = false;
};

struct LawsSection {
  std::vector<Law> items;
  std::string domain = "A";
  std::size_t n_inputs = 200;
  bool hold = true;
};

struct GeneralizationSection {
  std::map<std::string, double> lipschitz;
  std::size_t max_depth = 4;
  std::size_t cap = 500;
  std::size_t level_cap = 0;
  std::size_t n_inputs = 50;
  std::optional<std::array<double, 3>> eps;  // loc, law, ana
  bool expect_pass = true;
};

struct StochasticItem {
  Term term;
  std::size_t n_inputs = 50;
  std::size_t n_samples = 100;
  bool equal = true;
  ParamMap params_b;
};

struct SpuriousSection {
  double law_threshold = 0.1;
  double residual_threshold = 1e-9;
  bool fired = true;
};

struct DriftSection {
  Term term;
  std::vector<TrajectorySnapshot> trajectory;
  std::size_t n_inputs = 50;
  double rise = 0.5;
  double flat = 0.01;
  bool fired = true;
};

struct CapPayload {
  DomainInterpretation a;
  DomainInterpretation b;
  AnalogyMap analogy;
  std::vector<Expectation> evaluations;
  std::vector<ResidualItem> residuals;
  std::vector<LocalityItem> locality;
  std::optional<LawsSection> laws;
  std::optional<GeneralizationSection> generalization;
  std::vector<StochasticItem> stochastic;
  std::optional<SpuriousSection> spurious;
  std::optional<DriftSection> drift;
};

Box read_box(Reader& r, const Json& j, const std::string& path) {
  const auto side = [&](const char* key) {
    const Json* v = r.require(j, key, path);
    if (!v) return Vec{};
    if (v->is_number()) return Vec(Vec::Constant(1, v->get<double>()));
    const auto xs = r.numbers(j, key, path, std::nullopt);
    return Vec(Eigen::Map<const Vec>(xs.data(), static_cast<Eigen::Index>(xs.size())));
  };
  Box b;
  b.lower = side("lower");
  b.upper = side("upper");
  if (b.lower.size() != b.upper.size()) {
    r.fail(path, "lower and upper differ in dimension");
  } else if ((b.lower.array() > b.upper.array()).any()) {
    r.fail(path, "lower exceeds upper");
  }
  return b;
}

ParamMap read_param_map(Reader& r, const Json& j, const std::string& path) {
  ParamMap out;
  if (!r.object(j, path)) return out;
  for (const auto& [sym, v] : j.items()) out[sym] = r.numbers(j, sym, path, std::nullopt);
  return out;
}

DomainInterpretation read_domain(Reader& r, const Json& j, const std::string& path) {
  DomainInterpretation d;
  if (!r.object(j, path)) return d;
  r.keys(j, path, {"name", "sorts", "symbols", "carriers", "relations", "aliases"});
  const std::size_t before = r.issues.size();
  d.name = r.string(j, "name", path, std::nullopt);
  for (const auto& s : r.strings(j, "sorts", path, std::nullopt)) d.signature.sorts.insert(s);
  if (const Json* syms = r.require(j, "symbols", path); syms && r.array(*syms, Reader::at(path, "symbols"))) {
    for (std::size_t i = 0; i < syms->size(); ++i) {
      const std::string sp = Reader::at(Reader::at(path, "symbols"), i);
      const Json& s = (*syms)[i];
      if (!r.object(s, sp)) continue;
      r.keys(s, sp, {"name", "inputs", "output", "implementation", "params"});
      SymbolDecl decl;
      decl.symbol = r.string(s, "name", sp, std::nullopt);
      decl.inputs = r.strings(s, "inputs", sp, std::nullopt);
      decl.output = r.string(s, "output", sp, std::nullopt);
      decl.kind = decl.output == kBoolSort ? SymbolKind::Predicate : SymbolKind::Function;
      decl.implementation = r.string(s, "implementation", sp, std::nullopt);
      if (s.contains("implementation") && !find_library_primitive(decl.implementation)) {
        r.fail(Reader::at(sp, "implementation"), "unknown primitive '" + decl.implementation + "'");
      }
      const auto params = r.numbers(s, "params", sp, std::vector<double>{});
      decl.param_arity = params.size();
      if (!params.empty()) d.params[decl.symbol] = params;
      if (d.signature.symbols.count(decl.symbol)) r.fail(Reader::at(sp, "name"), "duplicate symbol");
      d.signature.symbols[decl.symbol] = decl;
    }
  }
  if (const Json* cs = r.require(j, "carriers", path); cs && r.object(*cs, Reader::at(path, "carriers"))) {
    for (const auto& [sort, c] : cs->items()) {
      const std::string cp = Reader::at(Reader::at(path, "carriers"), sort);
      if (!r.object(c, cp)) continue;
      if (c.contains("entities")) {
        r.keys(c, cp, {"entities"});
        d.carriers[sort] = Carrier::of_entities(r.strings(c, "entities", cp, std::nullopt));
      } else {
        r.keys(c, cp, {"lower", "upper"});
        d.carriers[sort] = Carrier::of_box(read_box(r, c, cp));
      }
    }
  }
  if (const Json* rels = r.find(j, "relations"); rels && r.object(*rels, Reader::at(path, "relations"))) {
    for (const auto& [sym, pairs] : rels->items()) {
      const std::string rp = Reader::at(Reader::at(path, "relations"), sym);
      auto& table = d.relations[sym];
      if (!r.array(pairs, rp)) continue;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        const Json& e = pairs[i];
        const bool shape = e.is_array() && (e.size() == 2 || e.size() == 3) && e[0].is_string() && e[1].is_string() &&
                           (e.size() == 2 || e[2].is_number());
        if (!shape) {
          r.fail(Reader::at(rp, i), "expected [left, right] or [left, right, truth]");
          continue;
        }
        table[{e[0].get<std::string>(), e[1].get<std::string>()}] = e.size() == 3 ? e[2].get<double>() : 1.0;
      }
    }
  }
  if (const Json* al = r.find(j, "aliases"); al && r.object(*al, Reader::at(path, "aliases"))) {
    for (const auto& [sym, owner] : al->items()) {
      d.param_aliases[sym] = r.string_value(owner, Reader::at(Reader::at(path, "aliases"), sym));
    }
  }
  if (r.issues.size() == before) {
    for (const auto& msg : d.signature.issues()) r.fail(Reader::at(path, "symbols"), msg);
    for (const auto& msg : d.issues()) r.fail(path, msg);
  }
  return d;
}

AnalogyMap read_analogy(Reader& r, const Json& j, const std::string& path) {
  AnalogyMap m;
  if (!r.object(j, path)) return m;
  r.keys(j, path, {"sort_map", "phi", "correspondence", "bilipschitz"});
  if (const Json* sm = r.find(j, "sort_map"); sm && r.object(*sm, Reader::at(path, "sort_map"))) {
    for (const auto& [k, v] : sm->items()) m.sort_map[k] = r.string_value(v, Reader::at(Reader::at(path, "sort_map"), k));
  }
  if (const Json* phi = r.find(j, "phi"); phi && r.object(*phi, Reader::at(path, "phi"))) {
    for (const auto& [sort, t] : phi->items()) {
      const std::string tp = Reader::at(Reader::at(path, "phi"), sort);
      if (!r.object(t, tp)) continue;
      if (t.contains("map")) {
        r.keys(t, tp, {"map"});
        std::map<std::string, std::string> table;
        const Json& mp = t["map"];
        if (r.object(mp, Reader::at(tp, "map"))) {
          for (const auto& [k, v] : mp.items()) table[k] = r.string_value(v, Reader::at(Reader::at(tp, "map"), k));
        }
        m.phi[sort] = SortTranslator::finite(std::move(table));
      } else {
        r.keys(t, tp, {"slope", "offset"});
        m.phi[sort] = SortTranslator::affine(r.number(t, "slope", tp, 1.0), r.number(t, "offset", tp, 0.0));
      }
    }
  }
  if (const Json* c = r.require(j, "correspondence", path); c && r.object(*c, Reader::at(path, "correspondence"))) {
    for (const auto& [k, v] : c->items()) {
      m.correspondence[k] = r.string_value(v, Reader::at(Reader::at(path, "correspondence"), k));
    }
  }
  if (j.contains("bilipschitz")) {
    const auto bl = r.numbers(j, "bilipschitz", path, std::nullopt);
    if (bl.size() != 2 || !(bl[0] > 0 && bl[0] <= bl[1])) {
      r.fail(Reader::at(path, "bilipschitz"), "expected [c, C] with 0 < c <= C");
    } else {
      m.bilipschitz = std::make_pair(bl[0], bl[1]);
    }
  }
  return m;
}

// Parses and sort-checks a term against `d`. Returns nullopt after recording an issue.
std::optional<Term> read_term(Reader& r, const Json& obj, const std::string& key, const std::string& path,
                              const DomainInterpretation& d) {
  const std::string text = r.string(obj, key, path, std::nullopt);
  if (!obj.contains(key)) return std::nullopt;
  try {
    Term t = parse_term(text);
    infer_sorts(t, d.signature);
    return t;
  } catch (const Error& e) {
    r.fail(Reader::at(path, key), e.what());
    return std::nullopt;
  }
}

std::vector<Term> read_terms(Reader& r, const Json& obj, const std::string& key, const std::string& path,
                             const DomainInterpretation& d) {
  std::vector<Term> out;
  const Json* arr = r.require(obj, key, path);
  if (!arr || !r.array(*arr, Reader::at(path, key))) return out;
  for (std::size_t i = 0; i < arr->size(); ++i) {
    const std::string ip = Reader::at(Reader::at(path, key), i);
    const std::string text = r.string_value((*arr)[i], ip);
    try {
      Term t = parse_term(text);
      infer_sorts(t, d.signature);
      out.push_back(std::move(t));
    } catch (const Error& e) {
      r.fail(ip, e.what());
    }
  }
  return out;
}

Value value_from(const Json& j, const std::string& sort, const DomainInterpretation& d) {
  if (sort == kBoolSort) return Value::of_truth(j.get<double>());
  if (d.carrier(sort).finite) return Value::of_entity(j.get<std::string>());
  if (j.is_number()) return Value::of_real(j.get<double>());
  const auto xs = j.get<std::vector<double>>();
  return Value::of_real(Vec(Eigen::Map<const Vec>(xs.data(), static_cast<Eigen::Index>(xs.size()))));
}

bool value_shape_ok(const Json& j, const std::string& sort, const DomainInterpretation& d) {
  if (sort == kBoolSort) return j.is_number();
  if (d.carrier(sort).finite) return j.is_string();
  if (j.is_number()) return true;
  return j.is_array() && std::all_of(j.begin(), j.end(), [](const Json& x) { return x.is_number(); });
}

std::vector<Value> values_from(const std::vector<Json>& xs, const std::vector<std::string>& sorts,
                               const DomainInterpretation& d) {
  std::vector<Value> out;
  for (std::size_t i = 0; i < xs.size(); ++i) out.push_back(value_from(xs[i], sorts[i], d));
  return out;
}

// Checks an input tuple against the term's input sorts in `d`.
void check_inputs(Reader& r, const Json& tuple, const std::string& path, const Term& t,
                  const DomainInterpretation& d) {
  const auto sorts = infer_sorts(t, d.signature).inputs;
  if (!tuple.is_array() || tuple.size() != sorts.size()) {
    r.fail(path, "expected " + std::to_string(sorts.size()) + " inputs");
    return;
  }
  for (std::size_t i = 0; i < sorts.size(); ++i) {
    if (!value_shape_ok(tuple[i], sorts[i], d)) r.fail(Reader::at(path, i), "does not fit sort " + sorts[i]);
  }
}

bool read_expect(Reader& r, const Json& obj, const std::string& path, const char* yes, const char* no,
                 const char* fallback) {
  const std::string e = r.string(obj, "expect", path, std::string(fallback));
  if (e != yes && e != no) r.fail(Reader::at(path, "expect"), std::string("expected ") + yes + " or " + no);
  return e == yes;
}

CapPayload read_cap(Reader& r, const Json& j) {
  CapPayload p;
  r.keys(j, "$.payload", {"domains", "analogy", "evaluations", "analogy_residuals", "locality", "laws",
                        "generalization", "stochastic", "detectors"});
  const Json* ds = r.require(j, "domains", "$.payload");
  if (ds && r.object(*ds, "$.payload.domains")) {
    r.keys(*ds, "$.payload.domains", {"A", "B"});
    if (const Json* a = r.require(*ds, "A", "$.payload.domains")) p.a = read_domain(r, *a, "$.payload.domains.A");
    if (const Json* b = r.find(*ds, "B")) {
      p.b = read_domain(r, *b, "$.payload.domains.B");
    } else {
      p.b = p.a;
    }
  }
  if (const Json* an = r.require(j, "analogy", "$.payload")) p.analogy = read_analogy(r, *an, "$.payload.analogy");
  if (!r.ok()) return p;
  for (const auto& msg : analogy_issues(p.analogy, p.a, p.b)) r.fail("$.payload.analogy", msg);
  if (!r.ok()) return p;
  const auto domain_of = [&](const std::string& name) -> const DomainInterpretation& {
    return name == "B" ? p.b : p.a;
  };

  if (const Json* ev = r.find(j, "evaluations"); ev && r.array(*ev, "$.payload.evaluations")) {
    for (std::size_t i = 0; i < ev->size(); ++i) {
      const std::string ep = Reader::at("$.payload.evaluations", i);
      const Json& e = (*ev)[i];
      if (!r.object(e, ep)) continue;
      r.keys(e, ep, {"name", "term", "domain", "inputs", "expected"});
      Expectation x;
      x.domain = r.string(e, "domain", ep, "A");
      if (x.domain != "A" && x.domain != "B") r.fail(Reader::at(ep, "domain"), "expected A or B");
      const auto& d = domain_of(x.domain);
      const auto t = read_term(r, e, "term", ep, d);
      x.name = r.string(e, "name", ep, "eval[" + std::to_string(i) + "]");
      const Json* in = r.require(e, "inputs", ep);
      const Json* ex = r.require(e, "expected", ep);
      if (!t || !in || !ex) continue;
      x.term = *t;
      check_inputs(r, *in, Reader::at(ep, "inputs"), x.term, d);
      if (!value_shape_ok(*ex, infer_sorts(x.term, d.signature).output, d)) {
        r.fail(Reader::at(ep, "expected"), "does not fit the output sort");
      }
      if (in->is_array()) x.inputs.assign(in->begin(), in->end());
      x.expected = *ex;
      p.evaluations.push_back(std::move(x));
    }
  }

  if (const Json* rs = r.find(j, "analogy_residuals"); rs && r.array(*rs, "$.payload.analogy_residuals")) {
    for (std::size_t i = 0; i < rs->size(); ++i) {
      const std::string rp = Reader::at("$.payload.analogy_residuals", i);
      const Json& e = (*rs)[i];
      if (!r.object(e, rp)) continue;
      r.keys(e, rp, {"term", "inputs", "n_inputs", "expect", "tolerance_key", "threshold"});
      ResidualItem item;
      const auto t = read_term(r, e, "term", rp, p.a);
      item.n_inputs = static_cast<std::size_t>(r.integer(e, "n_inputs", rp, 200, 1));
      item.at_least = read_expect(r, e, rp, "at_least", "at_most", "at_most");
      item.tolerance_key = r.string(e, "tolerance_key", rp, item.at_least ? "ana_break" : "eps_ana");
      item.threshold = r.number(e, "threshold", rp, item.at_least ? 1.0 : 1e-9);
      if (!t) continue;
      item.term = *t;
      try {
        map_term(p.analogy.correspondence, item.term);
      } catch (const Error& err) {
        r.fail(Reader::at(rp, "term"), err.what());
      }
      if (const Json* in = r.find(e, "inputs"); in && r.array(*in, Reader::at(rp, "inputs"))) {
        if (in->empty()) r.fail(Reader::at(rp, "inputs"), "needs at least one input tuple");
        for (std::size_t k = 0; k < in->size(); ++k) {
          check_inputs(r, (*in)[k], Reader::at(Reader::at(rp, "inputs"), k), item.term, p.a);
        }
        item.inputs = std::vector<Json>(in->begin(), in->end());
      }
      p.residuals.push_back(std::move(item));
    }
  }

  if (const Json* ls = r.find(j, "locality"); ls && r.array(*ls, "$.payload.locality")) {
    for (std::size_t i = 0; i < ls->size(); ++i) {
      const std::string lp = Reader::at("$.payload.locality", i);
      const Json& e = (*ls)[i];
      if (!r.object(e, lp)) continue;
      r.keys(e, lp, {"symbol", "terms", "n_inputs", "expect"});
      LocalityItem item;
      item.symbol = r.string(e, "symbol", lp, std::nullopt);
      if (e.contains("symbol") && !p.a.signature.symbols.count(item.symbol)) {
        r.fail(Reader::at(lp, "symbol"), "unknown symbol");
      }
      item.terms = read_terms(r, e, "terms", lp, p.a);
      item.n_inputs = static_cast<std::size_t>(r.integer(e, "n_inputs", lp, 200, 1));
      item.coupled = read_expect(r, e, lp, "coupled", "local", "local");
      p.locality.push_back(std::move(item));
    }
  }

  if (const Json* lw = r.find(j, "laws"); lw && r.object(*lw, "$.payload.laws")) {
    r.keys(*lw, "$.payload.laws", {"items", "domain", "n_inputs", "expect"});
    LawsSection s;
    s.domain = r.string(*lw, "domain", "$.payload.laws", "A");
    if (s.domain != "A" && s.domain != "B") r.fail("$.payload.laws.domain", "expected A or B");
    const auto& d = domain_of(s.domain);
    s.n_inputs = static_cast<std::size_t>(r.integer(*lw, "n_inputs", "$.payload.laws", 200, 1));
    s.hold = read_expect(r, *lw, "$.payload.laws", "hold", "break", "hold");
    if (const Json* items = r.require(*lw, "items", "$.payload.laws"); items && r.array(*items, "$.payload.laws.items")) {
      for (std::size_t i = 0; i < items->size(); ++i) {
        const std::string ip = Reader::at("$.payload.laws.items", i);
        const Json& e = (*items)[i];
        if (!r.object(e, ip)) continue;
        r.keys(e, ip, {"name", "left", "right", "weight"});
        Law law;
        law.name = r.string(e, "name", ip, "law" + std::to_string(i));
        const auto left = read_term(r, e, "left", ip, d);
        const auto right = read_term(r, e, "right", ip, d);
        law.weight = r.number(e, "weight", ip, 1.0);
        if (!(law.weight > 0)) r.fail(Reader::at(ip, "weight"), "must be positive");
        if (!left || !right) continue;
        law.left = *left;
        law.right = *right;
        try {
          const auto ls = infer_sorts(law.left, d.signature);
          const auto rs = infer_sorts(law.right, d.signature);
          if (ls.output != rs.output) r.fail(ip, "sides have different output sorts");
        } catch (const Error& err) {
          r.fail(ip, err.what());
        }
        s.items.push_back(std::move(law));
      }
    }
    p.laws = std::move(s);
  }

  if (const Json* g = r.find(j, "generalization"); g && r.object(*g, "$.payload.generalization")) {
    const std::string gp = "$.payload.generalization";
    r.keys(*g, gp, {"lipschitz", "max_depth", "cap", "level_cap", "n_inputs", "eps", "expect"});
    GeneralizationSection s;
    if (const Json* l = r.require(*g, "lipschitz", gp); l && r.object(*l, Reader::at(gp, "lipschitz"))) {
      for (const auto& [sym, v] : l->items()) {
        const std::string lp = Reader::at(Reader::at(gp, "lipschitz"), sym);
        const double L = r.number_value(v, lp);
        if (!(L >= 0)) r.fail(lp, "must be non-negative");
        if (!p.a.signature.symbols.count(sym)) r.fail(lp, "unknown symbol");
        s.lipschitz[sym] = L;
      }
      for (const auto& [sym, decl] : p.a.signature.symbols) {
        if (!s.lipschitz.count(sym)) r.fail(Reader::at(gp, "lipschitz"), "missing constant for " + sym);
      }
    }
    s.max_depth = static_cast<std::size_t>(r.integer(*g, "max_depth", gp, 4, 1));
    s.cap = static_cast<std::size_t>(r.integer(*g, "cap", gp, 500, 1));
    s.level_cap = static_cast<std::size_t>(r.integer(*g, "level_cap", gp, 0));
    s.n_inputs = static_cast<std::size_t>(r.integer(*g, "n_inputs", gp, 50, 1));
    if (const Json* e = r.find(*g, "eps"); e && r.object(*e, Reader::at(gp, "eps"))) {
      r.keys(*e, Reader::at(gp, "eps"), {"loc", "law", "ana"});
      s.eps = std::array<double, 3>{r.number(*e, "loc", Reader::at(gp, "eps"), 0.0),
                                    r.number(*e, "law", Reader::at(gp, "eps"), 0.0),
                                    r.number(*e, "ana", Reader::at(gp, "eps"), 0.0)};
    }
    s.expect_pass = read_expect(r, *g, gp, "pass", "lipschitz-inconsistent", "pass");
    p.generalization = std::move(s);
  }

  if (const Json* st = r.find(j, "stochastic"); st && r.array(*st, "$.payload.stochastic")) {
    for (std::size_t i = 0; i < st->size(); ++i) {
      const std::string sp = Reader::at("$.payload.stochastic", i);
      const Json& e = (*st)[i];
      if (!r.object(e, sp)) continue;
      r.keys(e, sp, {"term", "n_inputs", "n_samples", "expect", "params_b"});
      StochasticItem item;
      const auto t = read_term(r, e, "term", sp, p.a);
      item.n_inputs = static_cast<std::size_t>(r.integer(e, "n_inputs", sp, 50, 1));
      item.n_samples = static_cast<std::size_t>(r.integer(e, "n_samples", sp, 100, 50));
      item.equal = read_expect(r, e, sp, "equal", "different", "equal");
      if (const Json* pb = r.find(e, "params_b")) item.params_b = read_param_map(r, *pb, Reader::at(sp, "params_b"));
      if (!t) continue;
      item.term = *t;
      if (!is_stochastic(item.term, p.a.signature)) r.fail(Reader::at(sp, "term"), "term has no stochastic primitive");
      p.stochastic.push_back(std::move(item));
    }
  }

  if (const Json* det = r.find(j, "detectors"); det && r.object(*det, "$.payload.detectors")) {
    r.keys(*det, "$.payload.detectors", {"spurious", "drift"});
    if (const Json* s = r.find(*det, "spurious"); s && r.object(*s, "$.payload.detectors.spurious")) {
      const std::string sp = "$.payload.detectors.spurious";
      r.keys(*s, sp, {"law_threshold", "residual_threshold", "expect"});
      SpuriousSection sec;
      sec.law_threshold = r.number(*s, "law_threshold", sp, sec.law_threshold);
      sec.residual_threshold = r.number(*s, "residual_threshold", sp, sec.residual_threshold);
      sec.fired = read_expect(r, *s, sp, "fired", "quiet", "fired");
      if (!j.contains("laws")) r.fail(sp, "needs a laws section");
      p.spurious = sec;
    }
    if (const Json* d = r.find(*det, "drift"); d && r.object(*d, "$.payload.detectors.drift")) {
      const std::string dp = "$.payload.detectors.drift";
      r.keys(*d, dp, {"term", "trajectory", "n_inputs", "rise", "flat", "expect"});
      DriftSection sec;
      const auto t = read_term(r, *d, "term", dp, p.a);
      sec.n_inputs = static_cast<std::size_t>(r.integer(*d, "n_inputs", dp, 50, 1));
      sec.rise = r.number(*d, "rise", dp, sec.rise);
      sec.flat = r.number(*d, "flat", dp, sec.flat);
      sec.fired = read_expect(r, *d, dp, "fired", "quiet", "fired");
      if (const Json* tr = r.require(*d, "trajectory", dp); tr && r.array(*tr, Reader::at(dp, "trajectory"))) {
        if (tr->size() < 2) r.fail(Reader::at(dp, "trajectory"), "needs at least two snapshots");
        for (std::size_t k = 0; k < tr->size(); ++k) {
          const std::string kp = Reader::at(Reader::at(dp, "trajectory"), k);
          const Json& s = (*tr)[k];
          if (!r.object(s, kp)) continue;
          r.keys(s, kp, {"params_a", "params_b", "loss"});
          TrajectorySnapshot snap;
          if (const Json* pa = r.find(s, "params_a")) snap.params_a = read_param_map(r, *pa, Reader::at(kp, "params_a"));
          if (const Json* pb = r.find(s, "params_b")) snap.params_b = read_param_map(r, *pb, Reader::at(kp, "params_b"));
          snap.loss = r.number(s, "loss", kp, std::nullopt);
          sec.trajectory.push_back(std::move(snap));
        }
      }
      if (t) {
        sec.term = *t;
        p.drift = std::move(sec);
      }
    }
  }
  return p;
}

double check_value(bool fired) { return fired ? 1.0 : 0.0; }

ParamMap merged(const ParamMap& base, const ParamMap& overrides) {
  ParamMap out = base;
  for (const auto& [k, v] : overrides) out[k] = v;
  return out;
}

}  // namespace

void check_cap_payload(Reader& r, const Json& payload) { read_cap(r, payload); }

DiagnosticReport run_cap_payload(const Json& payload, const KindContext& ctx) {
  Reader r;
  CapPayload p = read_cap(r, payload);
  require_clean(r);
  const Tolerances& tol = ctx.tolerances;
  const std::uint64_t seed = ctx.seed;
  DiagnosticReport rep;
  rep.notes.push_back("inputs: uniform over declared carriers unless listed, seed " + std::to_string(seed));

  if (!p.evaluations.empty()) {
    Table& t = rep.add_table("evaluations", {"name", "term", "domain", "value", "expected"});
    for (const auto& e : p.evaluations) {
      const auto& d = e.domain == "B" ? p.b : p.a;
      const auto sorts = infer_sorts(e.term, d.signature);
      const Value got = evaluate(e.term, d, values_from(e.inputs, sorts.inputs, d));
      const Value want = value_from(e.expected, sorts.output, d);
      t.rows.push_back({e.name, render(e.term), e.domain, got.to_string(), want.to_string()});
      rep.add_check(e.name, "cap/term-evaluation", "eval_exact", value_distance(got, want), tol, 1e-9,
                    Comparison::AtMost);
    }
  }

  if (!p.residuals.empty()) {
    Table& t = rep.add_table("analogy_residuals", {"term", "mapped", "inputs", "residual"});
    for (std::size_t i = 0; i < p.residuals.size(); ++i) {
      const auto& item = p.residuals[i];
      double res = 0.0;
      std::size_t count = item.n_inputs;
      if (item.inputs) {
        const auto sorts = infer_sorts(item.term, p.a.signature).inputs;
        InputSet in;
        for (const auto& tuple : *item.inputs) in.push_back(values_from(tuple.get<std::vector<Json>>(), sorts, p.a));
        count = in.size();
        res = analogy_residual(item.term, p.analogy, p.a, p.b, in, seed);
      } else {
        count = analogy_inputs(item.term, p.a, item.n_inputs, seed + i).size();
        res = analogy_residual(item.term, p.analogy, p.a, p.b, item.n_inputs, seed + i);
      }
      const std::string rendered = render(item.term);
      t.rows.push_back({rendered, render(map_term(p.analogy.correspondence, item.term)), count, res});
      rep.add_check("analogy[" + rendered + "]", item.at_least ? "cap/translation-breaks" : "cap/translation-commutes",
                    item.tolerance_key, res, tol, item.threshold,
                    item.at_least ? Comparison::AtLeast : Comparison::AtMost);
    }
  }

  std::map<std::string, LocalityResult> by_symbol;
  if (!p.locality.empty()) {
    Table& t = rep.add_table("locality", {"symbol", "term", "mean_sq_jacobian"});
    for (std::size_t i = 0; i < p.locality.size(); ++i) {
      const auto& item = p.locality[i];
      LocalityResult res = locality_diagnostic(item.symbol, item.terms, p.a, item.n_inputs, seed + 17 * (i + 1));
      for (const auto& [term, v] : res.per_term) t.rows.push_back({item.symbol, term, v});
      for (const auto& n : res.notices) rep.notes.push_back("locality " + item.symbol + ": " + n);
      if (item.coupled) {
        rep.add_check("locality[" + item.symbol + "]", "cap/non-use-coupling", "loc_coupled", res.aggregate, tol, 0.01,
                      Comparison::AtLeast);
        const auto finding = detect_non_use_coupling({{item.symbol, res}}, tol.get("eps_loc", 1e-10));
        rep.add_check("detector_non_use[" + item.symbol + "]", "cap/non-use-coupling", "detector_non_use",
                      check_value(finding.fired), tol, 1.0, Comparison::AtLeast);
      } else {
        rep.add_check("locality[" + item.symbol + "]", "cap/parameter-locality", "eps_loc", res.aggregate, tol, 1e-10,
                      Comparison::AtMost);
      }
      if (res.vacuous) rep.notes.push_back("locality " + item.symbol + ": vacuous, no term evaluated");
      by_symbol[item.symbol] = std::move(res);
    }
  }

  std::optional<LawResidualResult> laws;
  if (p.laws) {
    const auto& d = p.laws->domain == "B" ? p.b : p.a;
    laws = law_residual(p.laws->items, d, p.laws->n_inputs, seed + 29);
    Table& t = rep.add_table("laws", {"law", "residual", "weight"});
    for (std::size_t i = 0; i < p.laws->items.size(); ++i) {
      t.rows.push_back({p.laws->items[i].name, laws->residuals[i], p.laws->items[i].weight});
    }
    Table& ins = rep.add_table("law_insensitivity", {"law", "symbol", "gradient_norm"});
    for (std::size_t i = 0; i < p.laws->items.size(); ++i) {
      for (std::size_t s = 0; s < laws->symbols.size(); ++s) {
        const double v = laws->insensitivity(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(s));
        if (!std::isnan(v)) ins.rows.push_back({p.laws->items[i].name, laws->symbols[s], v});
      }
    }
    if (p.laws->hold) {
      rep.add_check("law_total", "cap/law-stability", "eps_law", laws->quadratic_total, tol, 1e-12, Comparison::AtMost);
      rep.add_check("law_insensitivity", "cap/law-stability", "law_insensitivity", laws->max_insensitivity, tol, 1e-8,
                    Comparison::AtMost);
    } else {
      rep.add_check("law_total", "cap/law-violated", "law_break", laws->quadratic_total, tol, 1e-6,
                    Comparison::AtLeast);
    }
  }

  const auto generators = default_generators(p.a.signature);
  const auto generator_residual = [&] {
    double worst = 0.0;
    for (std::size_t i = 0; i < generators.size(); ++i) {
      worst = std::max(worst, analogy_residual(generators[i], p.analogy, p.a, p.b, 200, seed + 101 + i));
    }
    return worst;
  };

  if (p.generalization) {
    const auto& g = *p.generalization;
    std::array<double, 3> eps{};
    if (g.eps) {
      eps = *g.eps;
    } else {
      for (const auto& [sym, decl] : p.a.signature.symbols) {
        if (decl.param_arity == 0) continue;
        const auto loc = locality_diagnostic(sym, generators, p.a, 100, seed + 211);
        eps[0] = std::max(eps[0], loc.aggregate);
      }
      eps[1] = laws ? laws->quadratic_total : 0.0;
      eps[2] = generator_residual();
    }
    const auto set = generate_composites(p.a.signature, generators, g.max_depth, g.cap, g.level_cap);
    if (set.truncated) {
      rep.notes.push_back("composite enumeration truncated (cap " + std::to_string(g.cap) + ", per depth " +
                          std::to_string(g.level_cap) + ")");
    }
    const auto res = generalization_check(eps[0], eps[1], eps[2], g.lipschitz, set.terms, p.analogy, p.a, p.b,
                                          g.n_inputs, seed + 307);
    Table& t = rep.add_table("composites", {"term", "depth", "measured", "bound"});
    std::map<std::size_t, std::array<double, 3>> per_depth;  // count, max measured, bound
    for (const auto& c : res.composites) {
      t.rows.push_back({c.term, c.depth, c.measured, c.bound});
      auto& s = per_depth[c.depth];
      s[0] += 1;
      s[1] = std::max(s[1], c.measured);
      s[2] = c.bound;
    }
    Table& sum = rep.add_table("composites_by_depth", {"depth", "count", "max_measured", "bound"});
    for (const auto& [dep, s] : per_depth) sum.rows.push_back({dep, s[0], s[1], s[2]});
    Table& lip = rep.add_table("lipschitz", {"symbol", "declared", "observed"});
    for (const auto& [sym, L] : g.lipschitz) lip.rows.push_back({sym, L, res.observed_lipschitz.count(sym) ? res.observed_lipschitz.at(sym) : 0.0});
    rep.notes.push_back("generalization: eps_loc + eps_law + eps_ana = " + Json(res.epsilon_sum).dump());
    if (g.expect_pass) {
      rep.add_check("composite_violations", "cap/composite-propagation", "gen_violations",
                    static_cast<double>(res.violations), tol, 0.0, Comparison::AtMost);
      rep.add_check("lipschitz_inconsistent", "cap/composite-propagation", "gen_inconsistent",
                    static_cast<double>(res.inconsistent_symbols.size()), tol, 0.0, Comparison::AtMost);
    } else {
      rep.add_check("lipschitz_inconsistent", "cap/lipschitz-audit", "gen_inconsistent_min",
                    static_cast<double>(res.inconsistent_symbols.size()), tol, 1.0, Comparison::AtLeast);
    }
  }

  if (!p.stochastic.empty()) {
    Table& t = rep.add_table("stochastic", {"term", "mmd2_mean", "standard_error", "z"});
    for (std::size_t i = 0; i < p.stochastic.size(); ++i) {
      const auto& item = p.stochastic[i];
      DomainInterpretation b = p.b;
      b.params = merged(b.params, item.params_b);
      const auto res = stochastic_residual(item.term, p.analogy, p.a, b, item.n_inputs, item.n_samples, seed + 401 + i);
      double z = 0.0;
      if (res.standard_error > 0) {
        z = res.mean / res.standard_error;
      } else if (res.mean != 0.0) {
        z = std::copysign(std::numeric_limits<double>::infinity(), res.mean);
      }
      const std::string rendered = render(item.term);
      t.rows.push_back({rendered, res.mean, res.standard_error, z});
      if (item.equal) {
        rep.add_check("mmd_z[" + rendered + "]", "cap/stochastic-translation", "mmd_z", std::abs(z), tol, 3.0,
                      Comparison::AtMost);
      } else {
        rep.add_check("mmd_z[" + rendered + "]", "cap/stochastic-mismatch", "mmd_z_diff", z, tol, 5.0,
                      Comparison::AtLeast);
      }
    }
  }

  if (p.spurious) {
    const auto& s = *p.spurious;
    const double primitive = generator_residual();
    const auto f = detect_spurious_analogy(laws ? laws->quadratic_total : 0.0, primitive, s.law_threshold,
                                           s.residual_threshold);
    rep.notes.push_back("spurious: law total " + Json(f.law_total).dump() + ", primitive residual " +
                        Json(f.primitive_residual).dump());
    if (s.fired) {
      rep.add_check("detector_spurious", "cap/spurious-analogy", "detector_spurious", check_value(f.fired), tol, 1.0,
                    Comparison::AtLeast);
    } else {
      rep.add_check("detector_spurious", "cap/spurious-analogy", "detector_spurious", check_value(f.fired), tol, 0.0,
                    Comparison::AtMost);
    }
  }

  if (p.drift) {
    const auto& s = *p.drift;
    const auto f = detect_drift(s.term, p.analogy, p.a, p.b, s.trajectory, s.n_inputs, seed + 503, s.rise, s.flat);
    Table& t = rep.add_table("drift", {"snapshot", "residual", "loss"});
    for (std::size_t k = 0; k < f.residuals.size(); ++k) t.rows.push_back({k, f.residuals[k], s.trajectory[k].loss});
    rep.notes.push_back("drift: residual rise " + Json(f.residual_rise).dump() + ", loss spread " +
                        Json(f.loss_spread).dump());
    if (s.fired) {
      rep.add_check("detector_drift", "cap/silent-drift", "detector_drift", check_value(f.fired), tol, 1.0,
                    Comparison::AtLeast);
    } else {
      rep.add_check("detector_drift", "cap/silent-drift", "detector_drift", check_value(f.fired), tol, 0.0,
                    Comparison::AtMost);
    }
  }
  return rep;
}

}  // namespace mechdiag::detail
