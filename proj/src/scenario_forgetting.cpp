#include <algorithm>
#include <cmath>

#include "mechdiag/errors.hpp"
#include "mechdiag/forgetting.hpp"
#include "mechdiag/rng.hpp"
#include "scenario_internal.hpp"

namespace mechdiag::detail {

namespace {

struct Expect {
  bool exact_lap = false;
  bool rho_negative = false;
  bool forgetting = false;
};

struct LeakFamilySpec {
  std::size_t mechanism = 0;
  std::size_t leak = 0;
  std::vector<double> lambdas;
};

struct ForgettingPayload {
  BlockModel model;
  Task a;
  Task b;
  Vec theta0;
  Box box;
  std::size_t probe_points = 8;
  TrainConfig schedule;
  std::vector<double> etas;
  Expect expect;
  std::optional<LeakFamilySpec> leak_family;
};

Vec to_vec(const std::vector<double>& xs) {
  return Vec(Eigen::Map<const Vec>(xs.data(), static_cast<Eigen::Index>(xs.size())));
}

std::optional<BlockKind> kind_from(const std::string& s) {
  if (s == "scalar") return BlockKind::Scalar;
  if (s == "affine") return BlockKind::Affine;
  if (s == "mlp") return BlockKind::Mlp;
  return std::nullopt;
}

BlockModel read_model(Reader& r, const Json& j, const std::string& path) {
  BlockModel m;
  if (!r.object(j, path)) return m;
  r.keys(j, path, {"input_dim", "mechanisms"});
  const std::size_t before = r.issues.size();
  m.input_dim = static_cast<std::size_t>(r.integer(j, "input_dim", path, 0));
  const std::string mp = Reader::at(path, "mechanisms");
  if (const Json* ms = r.require(j, "mechanisms", path); ms && r.array(*ms, mp)) {
    for (std::size_t i = 0; i < ms->size(); ++i) {
      const std::string ip = Reader::at(mp, i);
      const Json& e = (*ms)[i];
      if (!r.object(e, ip)) continue;
      r.keys(e, ip, {"name", "block", "kind", "input", "out_dim", "hidden", "leaks"});
      BlockMechanism mech;
      mech.name = r.string(e, "name", ip, std::nullopt);
      mech.block = r.string(e, "block", ip, std::nullopt);
      const std::string kind = r.string(e, "kind", ip, "scalar");
      if (const auto k = kind_from(kind)) {
        mech.kind = *k;
      } else {
        r.fail(Reader::at(ip, "kind"), "unknown block kind '" + kind + "'");
      }
      mech.input = r.string(e, "input", ip, "x");
      mech.out_dim = static_cast<std::size_t>(r.integer(e, "out_dim", ip, 1, 1));
      mech.hidden = static_cast<std::size_t>(r.integer(e, "hidden", ip, 0));
      if (const Json* ls = r.find(e, "leaks"); ls && r.array(*ls, Reader::at(ip, "leaks"))) {
        for (std::size_t k = 0; k < ls->size(); ++k) {
          const std::string lp = Reader::at(Reader::at(ip, "leaks"), k);
          if (!r.object((*ls)[k], lp)) continue;
          r.keys((*ls)[k], lp, {"block", "gain"});
          mech.leaks.push_back({r.string((*ls)[k], "block", lp, std::nullopt), r.number((*ls)[k], "gain", lp, std::nullopt)});
        }
      }
      m.mechanisms.push_back(std::move(mech));
    }
  }
  if (r.issues.size() == before) {
    for (const auto& msg : m.issues()) r.fail(path, msg);
  }
  return m;
}

Task read_task(Reader& r, const Json& j, const std::string& path, const std::string& name, const BlockModel& model) {
  Task t;
  t.name = name;
  if (!r.object(j, path)) return t;
  r.keys(j, path, {"head", "loss", "data", "generator", "usage"});
  t.head = r.string(j, "head", path, std::nullopt);
  const std::string loss = r.string(j, "loss", path, "squared");
  if (loss == "logistic") {
    t.loss = LossKind::Logistic;
  } else if (loss != "squared") {
    r.fail(Reader::at(path, "loss"), "expected squared or logistic");
  }
  const bool has_data = j.contains("data"), has_gen = j.contains("generator");
  if (has_data == has_gen) r.fail(path, "needs exactly one of data or generator");
  if (const Json* d = r.find(j, "data"); d && r.array(*d, Reader::at(path, "data"))) {
    for (std::size_t i = 0; i < d->size(); ++i) {
      const std::string dp = Reader::at(Reader::at(path, "data"), i);
      if (!r.object((*d)[i], dp)) continue;
      r.keys((*d)[i], dp, {"x", "y"});
      t.inputs.push_back(to_vec(r.numbers((*d)[i], "x", dp, std::vector<double>{})));
      t.targets.push_back(to_vec(r.numbers((*d)[i], "y", dp, std::nullopt)));
    }
  }
  if (const Json* g = r.find(j, "generator"); g && r.object(*g, Reader::at(path, "generator"))) {
    const std::string gp = Reader::at(path, "generator");
    r.keys(*g, gp, {"n", "seed", "lower", "upper", "weights", "bias", "noise_sd"});
    const auto n = r.integer(*g, "n", gp, std::nullopt, 1);
    Rng rng(static_cast<std::uint64_t>(r.integer(*g, "seed", gp, 0)));
    const double lo = r.number(*g, "lower", gp, -1.0), hi = r.number(*g, "upper", gp, 1.0);
    const auto w = r.numbers(*g, "weights", gp, std::nullopt);
    const double bias = r.number(*g, "bias", gp, 0.0), sd = r.number(*g, "noise_sd", gp, 0.0);
    if (!(lo <= hi)) r.fail(gp, "lower exceeds upper");
    if (w.size() != model.input_dim) r.fail(Reader::at(gp, "weights"), "needs one weight per input coordinate");
    if (r.ok()) {
      for (std::int64_t i = 0; i < n; ++i) {
        Vec x(static_cast<Eigen::Index>(model.input_dim));
        for (Eigen::Index k = 0; k < x.size(); ++k) x(k) = rng.uniform(lo, hi);
        double y = bias + to_vec(w).dot(x);
        if (sd > 0) y += sd * rng.normal();
        t.inputs.push_back(x);
        t.targets.push_back(Vec::Constant(1, y));
      }
    }
  }
  if (j.contains("usage")) {
    const auto u = r.strings(j, "usage", path, std::nullopt);
    t.usage = std::set<std::string>(u.begin(), u.end());
  }
  return t;
}

ForgettingPayload read_forgetting(Reader& r, const Json& j) {
  ForgettingPayload p;
  r.keys(j, "$.payload", {"model", "tasks", "theta0", "probe_box", "probe_points", "schedule", "first_order", "expect",
                        "leak_family"});
  if (const Json* m = r.require(j, "model", "$.payload")) p.model = read_model(r, *m, "$.payload.model");
  if (!r.ok()) return p;
  if (const Json* ts = r.require(j, "tasks", "$.payload"); ts && r.object(*ts, "$.payload.tasks")) {
    r.keys(*ts, "$.payload.tasks", {"A", "B"});
    if (const Json* a = r.require(*ts, "A", "$.payload.tasks")) p.a = read_task(r, *a, "$.payload.tasks.A", "A", p.model);
    if (const Json* b = r.require(*ts, "B", "$.payload.tasks")) p.b = read_task(r, *b, "$.payload.tasks.B", "B", p.model);
  }
  if (!r.ok()) return p;
  for (const auto& msg : task_issues(p.model, p.a)) r.fail("$.payload.tasks.A", msg);
  for (const auto& msg : task_issues(p.model, p.b)) r.fail("$.payload.tasks.B", msg);
  const Eigen::Index dim = p.model.dimension();
  if (j.contains("theta0")) {
    p.theta0 = to_vec(r.numbers(j, "theta0", "$.payload", std::nullopt));
    if (p.theta0.size() != dim) r.fail("$.payload.theta0", "needs " + std::to_string(dim) + " entries");
  } else {
    p.theta0 = Vec::Zero(dim);
  }
  const auto side = [&](const Json& box, const char* key) -> Vec {
    const std::string bp = "$.payload.probe_box";
    const Json* v = r.require(box, key, bp);
    if (!v) return Vec::Zero(dim);
    if (v->is_number()) return Vec::Constant(dim, v->get<double>());
    const Vec out = to_vec(r.numbers(box, key, bp, std::nullopt));
    if (out.size() != dim) r.fail(Reader::at(bp, key), "needs " + std::to_string(dim) + " entries");
    return out;
  };
  if (const Json* box = r.require(j, "probe_box", "$.payload"); box && r.object(*box, "$.payload.probe_box")) {
    r.keys(*box, "$.payload.probe_box", {"lower", "upper"});
    p.box.lower = side(*box, "lower");
    p.box.upper = side(*box, "upper");
    if (p.box.lower.size() == p.box.upper.size() && (p.box.lower.array() > p.box.upper.array()).any()) {
      r.fail("$.payload.probe_box", "lower exceeds upper");
    }
    if (p.theta0.size() == p.box.lower.size() && p.box.lower.size() == p.box.upper.size() && !p.box.contains(p.theta0)) {
      r.fail("$.payload.theta0", "lies outside the probe box");
    }
  }
  p.probe_points = static_cast<std::size_t>(r.integer(j, "probe_points", "$.payload", 8, 1));
  if (const Json* s = r.require(j, "schedule", "$.payload"); s && r.object(*s, "$.payload.schedule")) {
    r.keys(*s, "$.payload.schedule", {"steps", "eta", "batch"});
    p.schedule.steps = static_cast<std::size_t>(r.integer(*s, "steps", "$.payload.schedule", std::nullopt, 1));
    p.schedule.eta = r.number(*s, "eta", "$.payload.schedule", std::nullopt);
    p.schedule.batch = static_cast<std::size_t>(r.integer(*s, "batch", "$.payload.schedule", 0));
    if (!(p.schedule.eta > 0)) r.fail("$.payload.schedule.eta", "must be positive");
  }
  if (const Json* f = r.find(j, "first_order"); f && r.object(*f, "$.payload.first_order")) {
    r.keys(*f, "$.payload.first_order", {"etas"});
    p.etas = r.numbers(*f, "etas", "$.payload.first_order", std::nullopt);
    bool decreasing = p.etas.size() >= 3;
    for (std::size_t i = 1; i < p.etas.size(); ++i) decreasing &= p.etas[i] < p.etas[i - 1];
    if (!decreasing) r.fail("$.payload.first_order.etas", "needs at least three strictly decreasing values");
  }
  if (const Json* e = r.find(j, "expect"); e && r.object(*e, "$.payload.expect")) {
    r.keys(*e, "$.payload.expect", {"exact_lap", "rho_negative", "forgetting"});
    p.expect.exact_lap = r.boolean(*e, "exact_lap", "$.payload.expect", false);
    p.expect.rho_negative = r.boolean(*e, "rho_negative", "$.payload.expect", false);
    p.expect.forgetting = r.boolean(*e, "forgetting", "$.payload.expect", false);
  }
  if (const Json* lf = r.find(j, "leak_family"); lf && r.object(*lf, "$.payload.leak_family")) {
    const std::string lp = "$.payload.leak_family";
    r.keys(*lf, lp, {"mechanism", "leak_index", "lambdas"});
    LeakFamilySpec spec;
    const std::string mech = r.string(*lf, "mechanism", lp, std::nullopt);
    spec.leak = static_cast<std::size_t>(r.integer(*lf, "leak_index", lp, 0));
    spec.lambdas = r.numbers(*lf, "lambdas", lp, std::nullopt);
    const auto it = std::find_if(p.model.mechanisms.begin(), p.model.mechanisms.end(),
                                 [&](const BlockMechanism& m) { return m.name == mech; });
    if (it == p.model.mechanisms.end()) {
      r.fail(Reader::at(lp, "mechanism"), "unknown mechanism");
    } else {
      spec.mechanism = static_cast<std::size_t>(it - p.model.mechanisms.begin());
      if (spec.leak >= it->leaks.size()) r.fail(Reader::at(lp, "leak_index"), "mechanism has no such leak");
    }
    bool decreasing = spec.lambdas.size() >= 2;
    for (std::size_t i = 1; i < spec.lambdas.size(); ++i) decreasing &= spec.lambdas[i] < spec.lambdas[i - 1];
    for (double l : spec.lambdas) decreasing &= l >= 0;
    if (!decreasing) r.fail(Reader::at(lp, "lambdas"), "needs at least two non-negative strictly decreasing values");
    p.leak_family = std::move(spec);
  }
  return p;
}

struct RunResult {
  LapConstants constants;
  TrajectoryLog log;
  LemmaReport lemma;
  double lemma_excess = 0.0;  // normalized by max(1, |g_A| |g_B|)
  MultistepReport multistep;
};

RunResult run_once(const BlockModel& model, const ForgettingPayload& p, const std::vector<Vec>& grid,
                   std::uint64_t seed) {
  RunResult out;
  out.constants = lap_constants(model, p.a, p.b, p.box, grid);
  TrainConfig cfg = p.schedule;
  cfg.seed = seed;
  out.log = train_two_task(model, p.theta0, p.a, p.b, cfg);
  out.lemma = lemma_check(model, p.a, p.b, out.log, out.constants);
  for (std::size_t k = 0; k < out.lemma.steps.size(); ++k) {
    const auto& s = out.log.steps[k];
    const double excess = (out.lemma.steps[k].lhs - out.lemma.steps[k].rhs) / std::max(1.0, s.g_a.norm() * s.g_b.norm());
    out.lemma_excess = k == 0 ? excess : std::max(out.lemma_excess, excess);
  }
  if (!out.log.diverged) {
    const double L = smoothness_estimate(model, p.a, out.log, 16, seed + 5);
    out.multistep = multistep_bound_check(out.log, L);
  }
  return out;
}

}  // namespace

void check_forgetting_payload(Reader& r, const Json& payload) { read_forgetting(r, payload); }

DiagnosticReport run_forgetting_payload(const Json& payload, const KindContext& ctx) {
  Reader r;
  const ForgettingPayload p = read_forgetting(r, payload);
  require_clean(r);
  const Tolerances& tol = ctx.tolerances;
  DiagnosticReport rep;
  const auto grid = probe_grid(p.box, p.probe_points, ctx.seed);
  const RunResult main = run_once(p.model, p, grid, ctx.seed);
  const auto& log = main.log;

  Table& traj = rep.add_table("trajectory", {"t", "risk_a", "risk_b", "inner", "inner_hat", "rho", "lemma_lhs", "lemma_rhs"});
  for (std::size_t k = 0; k < log.steps.size(); ++k) {
    const auto& s = log.steps[k];
    traj.rows.push_back({s.t, s.risk_a, s.risk_b, s.inner, s.inner_hat, s.rho, main.lemma.steps[k].lhs,
                         main.lemma.steps[k].rhs});
  }
  std::vector<std::string> block_cols{"t"};
  for (const auto& b : log.blocks) block_cols.push_back(b);
  Table& blocks = rep.add_table("alignment_by_block", block_cols);
  for (const auto& s : log.steps) {
    std::vector<Json> row{s.t};
    for (double v : s.per_block) row.push_back(v);
    blocks.rows.push_back(std::move(row));
  }
  rep.notes.push_back("lap constants: eps_loc " + Json(main.constants.eps_loc).dump() + ", eps_aut " +
                      Json(main.constants.eps_aut).dump() + ", c_est " + Json(main.constants.c_est).dump());
  for (const auto& v : main.constants.usage_violations) {
    rep.notes.push_back("usage audit: gradient outside declared usage at " + v);
  }

  rep.add_check("diverged", "forgetting/stable-schedule", "diverged", log.diverged ? 1.0 : 0.0, tol, 0.0,
                Comparison::AtMost);
  rep.add_check("lemma_excess", "forgetting/alignment-lemma", "lemma_excess", main.lemma_excess, tol, 1e-12,
                Comparison::AtMost);
  if (!log.diverged) {
    rep.add_check("multistep_excess", "forgetting/multistep-bound", "multistep_excess", -main.multistep.slack, tol, 0.0,
                  Comparison::AtMost);
    rep.notes.push_back("multistep: smoothness " + Json(main.multistep.smoothness).dump() + " (" + kSmoothnessCaveat +
                        ", safety factor applied)");
    Table& ms = rep.add_table("multistep", {"measured", "inner_term", "curvature_term", "rhs", "smoothness"});
    ms.rows.push_back({main.multistep.measured, main.multistep.inner_term, main.multistep.curvature_term,
                       main.multistep.rhs, main.multistep.smoothness});
  }
  const double delta_ra = log.final_risk_a - (log.steps.empty() ? log.final_risk_a : log.steps.front().risk_a);
  if (p.expect.exact_lap) {
    double worst = 0.0;
    for (const auto& s : log.steps) worst = std::max(worst, std::abs(s.inner));
    rep.add_check("exact_lap_inner", "forgetting/exact-lap-no-interference", "exact_lap", worst, tol, 1e-10,
                  Comparison::AtMost);
    rep.add_check("exact_lap_delta_ra", "forgetting/exact-lap-no-interference", "exact_lap", std::abs(delta_ra), tol,
                  1e-10, Comparison::AtMost);
  }
  if (p.expect.rho_negative) {
    double mean = 0.0;
    for (const auto& s : log.steps) mean += s.rho / static_cast<double>(log.steps.size());
    rep.add_check("mean_rho", "forgetting/negative-alignment", "rho_max", mean, tol, 0.0, Comparison::AtMost);
  }
  if (p.expect.forgetting) {
    rep.add_check("delta_risk_a", "forgetting/risk-increase", "forgetting_min", delta_ra, tol, 1e-6,
                  Comparison::AtLeast);
  }

  if (!p.etas.empty()) {
    const auto fo = first_order_check(p.model, p.theta0, p.a, p.b, p.etas, ctx.seed + 11);
    Table& t = rep.add_table("first_order", {"eta", "delta_ra", "predicted", "remainder_over_eta2"});
    for (const auto& row : fo.rows) t.rows.push_back({row.eta, row.delta_ra, row.predicted, row.ratio});
    if (fo.disjoint) {
      rep.add_check("first_order_within_kappa", "forgetting/first-order", "first_order_kappa",
                    fo.within_kappa ? 0.0 : 1.0, tol, 0.0, Comparison::AtMost);
    } else {
      rep.add_check("first_order_spread", "forgetting/first-order", "first_order_spread", fo.ratio_spread, tol, 0.1,
                    Comparison::AtMost);
    }
  }

  if (p.leak_family) {
    const auto& lf = *p.leak_family;
    Table& t = rep.add_table("leak_family", {"lambda", "eps_loc", "eps_aut", "delta_ra", "lemma_excess"});
    std::vector<double> auts, deltas;
    double lemma_worst = main.lemma_excess;
    for (std::size_t i = 0; i < lf.lambdas.size(); ++i) {
      BlockModel m = p.model;
      m.mechanisms[lf.mechanism].leaks[lf.leak].gain = lf.lambdas[i];
      const RunResult res = run_once(m, p, grid, ctx.seed);
      const double d = res.log.final_risk_a - res.log.steps.front().risk_a;
      t.rows.push_back({lf.lambdas[i], res.constants.eps_loc, res.constants.eps_aut, d, res.lemma_excess});
      auts.push_back(res.constants.eps_aut);
      deltas.push_back(std::abs(d));
      lemma_worst = std::max(lemma_worst, res.lemma_excess);
    }
    std::size_t breaks = 0;
    for (std::size_t i = 1; i < auts.size(); ++i) {
      breaks += !(auts[i] < auts[i - 1]);
      breaks += !(deltas[i] < deltas[i - 1]);
    }
    rep.add_check("leak_family_monotone", "forgetting/leak-strength", "leak_monotone", static_cast<double>(breaks), tol,
                  0.0, Comparison::AtMost);
    rep.add_check("leak_family_lemma_excess", "forgetting/alignment-lemma", "lemma_excess", lemma_worst, tol, 1e-12,
                  Comparison::AtMost);
  }
  return rep;
}

}  // namespace mechdiag::detail
