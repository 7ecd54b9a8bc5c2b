#include <cmath>

#include "mechdiag/epistemics.hpp"
#include "scenario_internal.hpp"

namespace mechdiag::detail {

namespace {

struct Decomposition {
  std::string h;
  std::string e;
  std::map<std::string, double> expect;
};

struct SpaceEntry {
  std::string name;
  FiniteProbabilitySpace space;
  std::vector<Decomposition> decompositions;
};

struct LogEntry {
  std::string id;
  EpisodeLog log;
  double alpha = 1.0;
  double beta = 1.0;
  std::map<std::string, double> expect;
};

struct EpistemicsPayload {
  std::vector<SpaceEntry> spaces;
  std::optional<std::pair<std::size_t, std::uint64_t>> identity;  // spaces, seed offset
  std::vector<LogEntry> logs;
  std::optional<std::size_t> fuzz_cases;
  double fuzz_alpha = 1.5;
  double fuzz_beta = 0.5;
};

std::map<std::string, double> read_expect(Reader& r, const Json& obj, const std::string& path,
                                          std::initializer_list<const char*> allowed) {
  std::map<std::string, double> out;
  const Json* e = r.find(obj, "expect");
  if (!e) return out;
  const std::string ep = Reader::at(path, "expect");
  if (!r.object(*e, ep)) return out;
  r.keys(*e, ep, allowed);
  for (const auto& [k, v] : e->items()) out[k] = r.number_value(v, Reader::at(ep, k));
  return out;
}

EpisodeLog read_log(Reader& r, const Json& j, const std::string& path) {
  EpisodeLog log;
  log.resource_basis = r.string(j, "resource_basis", path, std::nullopt);
  log.cost = r.number(j, "cost", path, std::nullopt);
  if (const Json* cs = r.find(j, "conjectures"); cs && r.array(*cs, Reader::at(path, "conjectures"))) {
    for (std::size_t i = 0; i < cs->size(); ++i) {
      const std::string cp = Reader::at(Reader::at(path, "conjectures"), i);
      const Json& c = (*cs)[i];
      if (!r.object(c, cp)) continue;
      r.keys(c, cp, {"id", "novel", "changes_do_law", "tests"});
      Conjecture cj;
      cj.id = r.string(c, "id", cp, "c" + std::to_string(i));
      cj.novel = r.boolean(c, "novel", cp, std::nullopt);
      cj.changes_do_law = r.boolean(c, "changes_do_law", cp, std::nullopt);
      if (const Json* ts = r.find(c, "tests"); ts && r.array(*ts, Reader::at(cp, "tests"))) {
        for (std::size_t k = 0; k < ts->size(); ++k) {
          const std::string tp = Reader::at(Reader::at(cp, "tests"), k);
          if (!r.object((*ts)[k], tp)) continue;
          r.keys((*ts)[k], tp, {"severity", "survived"});
          cj.tests.push_back({r.number((*ts)[k], "severity", tp, std::nullopt),
                              r.boolean((*ts)[k], "survived", tp, std::nullopt)});
        }
      }
      log.conjectures.push_back(std::move(cj));
    }
  }
  if (const Json* qs = r.find(j, "queries"); qs && r.array(*qs, Reader::at(path, "queries"))) {
    for (std::size_t i = 0; i < qs->size(); ++i) {
      const std::string qp = Reader::at(Reader::at(path, "queries"), i);
      const Json& q = (*qs)[i];
      if (!r.object(q, qp)) continue;
      r.keys(q, qp, {"id", "weight", "answerable_before", "answerable_after", "validated"});
      log.queries.push_back({r.string(q, "id", qp, "q" + std::to_string(i)), r.number(q, "weight", qp, std::nullopt),
                             r.boolean(q, "answerable_before", qp, std::nullopt),
                             r.boolean(q, "answerable_after", qp, std::nullopt),
                             r.boolean(q, "validated", qp, std::nullopt)});
    }
  }
  if (const Json* es = r.find(j, "edits"); es && r.array(*es, Reader::at(path, "edits"))) {
    for (std::size_t i = 0; i < es->size(); ++i) {
      const std::string ep = Reader::at(Reader::at(path, "edits"), i);
      const Json& e = (*es)[i];
      if (!r.object(e, ep)) continue;
      r.keys(e, ep, {"id", "fail", "hold"});
      log.edits.push_back({r.string(e, "id", ep, "e" + std::to_string(i)),
                           static_cast<long long>(r.integer(e, "fail", ep, std::nullopt)),
                           r.boolean(e, "hold", ep, std::nullopt)});
    }
  }
  return log;
}

EpistemicsPayload read_epistemics(Reader& r, const Json& j) {
  EpistemicsPayload p;
  r.keys(j, "$.payload", {"spaces", "random_identity", "logs", "fuzz"});
  if (const Json* ss = r.find(j, "spaces"); ss && r.array(*ss, "$.payload.spaces")) {
    for (std::size_t i = 0; i < ss->size(); ++i) {
      const std::string sp = Reader::at("$.payload.spaces", i);
      const Json& s = (*ss)[i];
      if (!r.object(s, sp)) continue;
      r.keys(s, sp, {"name", "outcomes", "probabilities", "events", "decompositions"});
      SpaceEntry entry;
      entry.name = r.string(s, "name", sp, "space" + std::to_string(i));
      entry.space.outcomes = r.strings(s, "outcomes", sp, std::nullopt);
      entry.space.probabilities = r.numbers(s, "probabilities", sp, std::nullopt);
      if (const Json* ev = r.require(s, "events", sp); ev && r.object(*ev, Reader::at(sp, "events"))) {
        for (const auto& [name, members] : ev->items()) {
          const auto list = r.strings(*ev, name, Reader::at(sp, "events"), std::nullopt);
          entry.space.events[name] = std::set<std::string>(list.begin(), list.end());
        }
      }
      for (const auto& msg : entry.space.issues()) r.fail(sp, msg);
      if (const Json* ds = r.find(s, "decompositions"); ds && r.array(*ds, Reader::at(sp, "decompositions"))) {
        for (std::size_t k = 0; k < ds->size(); ++k) {
          const std::string dp = Reader::at(Reader::at(sp, "decompositions"), k);
          const Json& d = (*ds)[k];
          if (!r.object(d, dp)) continue;
          r.keys(d, dp, {"h", "e", "expect"});
          Decomposition dec;
          dec.h = r.string(d, "h", dp, std::nullopt);
          dec.e = r.string(d, "e", dp, std::nullopt);
          for (const auto* key : {&dec.h, &dec.e}) {
            if (!key->empty() && !entry.space.events.count(*key)) r.fail(dp, "unknown event '" + *key + "'");
          }
          if (entry.space.events.count(dec.e) && entry.space.issues().empty()) {
            const auto& e = entry.space.events.at(dec.e);
            const double pe = entry.space.probability(e);
            if (!(pe > 0) || e.size() == entry.space.outcomes.size()) {
              r.fail(Reader::at(dp, "e"), "evidence must have probability strictly between 0 and 1");
            }
          }
          dec.expect = read_expect(r, d, dp, {"delta", "overlap", "countersupport"});
          entry.decompositions.push_back(std::move(dec));
        }
      }
      p.spaces.push_back(std::move(entry));
    }
  }
  if (const Json* ri = r.find(j, "random_identity"); ri && r.object(*ri, "$.payload.random_identity")) {
    r.keys(*ri, "$.payload.random_identity", {"spaces", "seed"});
    p.identity = std::make_pair(static_cast<std::size_t>(r.integer(*ri, "spaces", "$.payload.random_identity", 10000, 1)),
                                static_cast<std::uint64_t>(r.integer(*ri, "seed", "$.payload.random_identity", 0)));
  }
  if (const Json* ls = r.find(j, "logs"); ls && r.array(*ls, "$.payload.logs")) {
    for (std::size_t i = 0; i < ls->size(); ++i) {
      const std::string lp = Reader::at("$.payload.logs", i);
      const Json& l = (*ls)[i];
      if (!r.object(l, lp)) continue;
      r.keys(l, lp, {"id", "resource_basis", "cost", "conjectures", "queries", "edits", "alpha", "beta", "expect"});
      LogEntry entry;
      entry.id = r.string(l, "id", lp, "log" + std::to_string(i));
      const std::size_t before = r.issues.size();
      entry.log = read_log(r, l, lp);
      if (r.issues.size() == before) {
        for (const auto& msg : entry.log.issues()) r.fail(lp, msg);
      }
      entry.alpha = r.number(l, "alpha", lp, 1.0);
      entry.beta = r.number(l, "beta", lp, 1.0);
      if (!(entry.alpha > 0)) r.fail(Reader::at(lp, "alpha"), "must be positive");
      if (!(entry.beta > 0)) r.fail(Reader::at(lp, "beta"), "must be positive");
      entry.expect = read_expect(r, l, lp, {"ecr", "crx", "sey"});
      p.logs.push_back(std::move(entry));
    }
  }
  if (const Json* f = r.find(j, "fuzz"); f && r.object(*f, "$.payload.fuzz")) {
    r.keys(*f, "$.payload.fuzz", {"cases", "alpha", "beta"});
    p.fuzz_cases = static_cast<std::size_t>(r.integer(*f, "cases", "$.payload.fuzz", 1000, 1));
    p.fuzz_alpha = r.number(*f, "alpha", "$.payload.fuzz", p.fuzz_alpha);
    p.fuzz_beta = r.number(*f, "beta", "$.payload.fuzz", p.fuzz_beta);
    if (!(p.fuzz_alpha > 0) || !(p.fuzz_beta > 0)) r.fail("$.payload.fuzz", "alpha and beta must be positive");
  }
  return p;
}

}  // namespace

void check_epistemics_payload(Reader& r, const Json& payload) { read_epistemics(r, payload); }

DiagnosticReport run_epistemics_payload(const Json& payload, const KindContext& ctx) {
  Reader r;
  const EpistemicsPayload p = read_epistemics(r, payload);
  require_clean(r);
  const Tolerances& tol = ctx.tolerances;
  DiagnosticReport rep;

  if (!p.spaces.empty()) {
    Table& t = rep.add_table("popper_miller",
                             {"space", "h", "e", "p_h", "p_e", "delta", "overlap", "countersupport", "identity_residual"});
    for (const auto& s : p.spaces) {
      for (const auto& d : s.decompositions) {
        const auto pm = popper_miller_decompose(s.space, d.h, d.e);
        const std::string tag = s.name + ":" + d.h + "|" + d.e;
        t.rows.push_back({s.name, d.h, d.e, pm.p_h, pm.p_e, pm.delta, pm.overlap, pm.countersupport,
                          pm.identity_residual});
        rep.add_check("pm_identity[" + tag + "]", "epistemics/support-decomposition", "pm_identity",
                      std::abs(pm.identity_residual), tol, 1e-12, Comparison::AtMost);
        const std::map<std::string, double> got{
            {"delta", pm.delta}, {"overlap", pm.overlap}, {"countersupport", pm.countersupport}};
        for (const auto& [k, want] : d.expect) {
          rep.add_check(k + "[" + tag + "]", "epistemics/support-decomposition", "pm_exact",
                        std::abs(got.at(k) - want), tol, 1e-12, Comparison::AtMost);
        }
      }
    }
  }

  if (p.identity) {
    const auto sweep = popper_miller_sweep(p.identity->first, ctx.seed + p.identity->second);
    rep.notes.push_back("identity sweep: " + std::to_string(sweep.checked) + " of " + std::to_string(sweep.spaces) +
                        " draws had 0 < P(E) < 1");
    rep.add_check("pm_identity_random", "epistemics/support-decomposition", "pm_identity", sweep.worst_residual, tol,
                  1e-12, Comparison::AtMost);
  }

  if (!p.logs.empty()) {
    Table& t = rep.add_table("metrics", {"log", "cost", "ecr", "crx", "sey", "retractions"});
    for (const auto& l : p.logs) {
      const std::map<std::string, double> got{
          {"ecr", ecr(l.log)}, {"crx", crx(l.log)}, {"sey", sey(l.log, l.alpha, l.beta)}};
      Json retracted = Json::array();
      for (const auto& q : l.log.retractions()) retracted.push_back(q);
      t.rows.push_back({l.id, l.log.cost, got.at("ecr"), got.at("crx"), got.at("sey"), retracted});
      for (const auto& [k, want] : l.expect) {
        rep.add_check(k + "[" + l.id + "]", "epistemics/" + k + "-example", "metric_exact",
                      std::abs(got.at(k) - want), tol, 0.0, Comparison::AtMost);
      }
    }
  }

  if (p.fuzz_cases) {
    const auto f = metric_fuzz(*p.fuzz_cases, ctx.seed + 7, p.fuzz_alpha, p.fuzz_beta);
    rep.add_check("fuzz_cost_homogeneity", "epistemics/cost-homogeneity", "fuzz_homogeneity", f.homogeneity_error, tol,
                  1e-12, Comparison::AtMost);
    rep.add_check("fuzz_monotonicity", "epistemics/monotonicity", "fuzz_monotone",
                  static_cast<double>(f.monotonicity_violations), tol, 0.0, Comparison::AtMost);
    rep.add_check("fuzz_nonnegative", "epistemics/monotonicity", "fuzz_monotone", static_cast<double>(f.negative_values),
                  tol, 0.0, Comparison::AtMost);
  }
  return rep;
}

}  // namespace mechdiag::detail
