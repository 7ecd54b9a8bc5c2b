#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mechdiag/errors.hpp"
#include "mechdiag/scenario.hpp"

using namespace mechdiag;
namespace fs = std::filesystem;

namespace {

const fs::path kCorpus{MECHDIAG_CORPUS_DIR};
const std::string kCli{MECHDIAG_CLI};

std::vector<fs::path> corpus_files() {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(kCorpus)) {
    if (e.path().extension() == ".json") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mechdiag_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = "'" + kCli + "' " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

bool has_issue_at(const std::vector<ScenarioIssue>& issues, const std::string& path) {
  return std::any_of(issues.begin(), issues.end(), [&](const ScenarioIssue& i) { return i.path == path; });
}

}  // namespace

TEST_CASE("every bundled scenario validates and passes") {
  const auto files = corpus_files();
  REQUIRE(files.size() >= 10);
  std::set<std::string> kinds;
  for (const auto& f : files) {
    CAPTURE(f.filename().string());
    const Scenario s = load_scenario(f);
    CHECK(validate_scenario(s).empty());
    const auto rep = run_scenario(s);
    CHECK(!rep.checks.empty());
    CHECK(rep.passed());
    CHECK(rep.scenario_id == f.stem().string());
    kinds.insert(s.kind);
  }
  CHECK(kinds.size() == scenario_kinds().size());
}

TEST_CASE("validate: issues carry JSON paths") {
  Json doc = Json::parse(slurp(kCorpus / "scm_chain_fork.json"));
  SUBCASE("unknown primitive") {
    doc["payload"]["model"]["mechanisms"][1]["primitive"] = "quadratic_bowl";
    const auto issues = validate_scenario_text(doc.dump());
    CHECK(has_issue_at(issues, "$.payload.model.mechanisms[1].primitive"));
  }
  SUBCASE("unknown envelope field") {
    doc["colour"] = "red";
    CHECK(has_issue_at(validate_scenario_text(doc.dump()), "$.colour"));
  }
  SUBCASE("kind does not match payload") {
    doc["kind"] = "forgetting";
    const auto issues = validate_scenario_text(doc.dump());
    CHECK(!issues.empty());
    CHECK(std::all_of(issues.begin(), issues.end(),
                      [](const ScenarioIssue& i) { return i.path.rfind("$.payload", 0) == 0; }));
  }
  SUBCASE("unknown kind") {
    doc["kind"] = "astrology";
    CHECK(has_issue_at(validate_scenario_text(doc.dump()), "$.kind"));
  }
  SUBCASE("seed must be a non-negative integer") {
    doc["seed"] = -4;
    CHECK(has_issue_at(validate_scenario_text(doc.dump()), "$.seed"));
  }
}

TEST_CASE("parse errors report line and column") {
  const std::string text = "{\n  \"id\": \"x\",\n  \"kind\": ,\n}\n";
  try {
    parse_scenario(text);
    FAIL("expected a SchemaError");
  } catch (const SchemaError& e) {
    CHECK(e.line() == 3);
    CHECK(e.column() >= 10);
  }
  const auto issues = validate_scenario_text(text);
  REQUIRE(issues.size() == 1);
  CHECK(issues[0].path == "$");
}

TEST_CASE("run refuses invalid scenarios") {
  Json doc = Json::parse(slurp(kCorpus / "obs_equivalence_default.json"));
  doc["payload"]["p"] = 1.5;
  CHECK_THROWS_AS(run_scenario(parse_scenario(doc.dump())), ValidationError);
}

TEST_CASE("threshold flips turn every check into a failure") {
  for (const auto& f : corpus_files()) {
    const Scenario s = load_scenario(f);
    const auto base = run_scenario(s);
    for (std::size_t i = 0; i < base.checks.size(); ++i) {
      const Check& c = base.checks[i];
      CAPTURE(f.filename().string());
      CAPTURE(c.name);
      REQUIRE(std::isfinite(c.measured));
      const double margin = std::max(1.0, std::abs(c.measured));
      RunOptions o;
      o.tolerances[c.tolerance_key] =
          c.comparison == Comparison::AtMost ? c.measured - margin : c.measured + margin;
      const auto flipped = run_scenario(s, o);
      REQUIRE(flipped.checks.size() == base.checks.size());
      CHECK(flipped.checks[i].name == c.name);
      CHECK(!flipped.checks[i].passed());
      CHECK(!flipped.passed());
    }
  }
}

TEST_CASE("seed override is recorded in the report") {
  const Scenario s = load_scenario(kCorpus / "epistemics_metrics.json");
  RunOptions o;
  o.seed = 99;
  const auto rep = run_scenario(s, o);
  CHECK(rep.seed == 99);
  CHECK(rep.passed());
}

TEST_CASE("reports are byte-identical across runs") {
  const auto a = scratch("det_a"), b = scratch("det_b");
  for (const auto& f : corpus_files()) {
    const Scenario s = load_scenario(f);
    write_report(run_scenario(s), a, ReportFormat::Json);
    write_report(run_scenario(s), b, ReportFormat::Json);
    write_report(run_scenario(s), a / "csv", ReportFormat::Csv);
    write_report(run_scenario(s), b / "csv", ReportFormat::Csv);
  }
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path other = b / fs::relative(e.path(), a);
    CAPTURE(other.string());
    REQUIRE(fs::exists(other));
    CHECK(slurp(e.path()) == slurp(other));
    ++compared;
  }
  CHECK(compared > corpus_files().size());
}

TEST_CASE("cli: exit codes") {
  const fs::path out = scratch("cli_out");
  const std::string o = " --out '" + out.string() + "'";
  const std::string fee = "'" + (kCorpus / "cap_currency_fee.json").string() + "'";
  CHECK(cli("run " + fee + o) == 0);
  CHECK(cli("run " + fee + o + " --tolerance eps_ana=0.5") == 1);
  CHECK(cli("run " + fee + o + " --tolerance eps_ana=oops") == 2);
  CHECK(cli("run " + fee + o + " --format csv") == 0);
  CHECK(fs::exists(out / "cap_currency_fee.checks.csv"));
  CHECK(cli("run '" + (out / "missing.json").string() + "'" + o) == 2);
  CHECK(cli("validate " + fee) == 0);

  const fs::path bad = scratch("cli_bad") / "bad.json";
  spit(bad, "{\n  \"id\": ,\n}\n");
  CHECK(cli("validate '" + bad.string() + "'") == 2);
  CHECK(cli("run '" + bad.string() + "'" + o) == 2);
  CHECK(cli("frobnicate") == 2);
}

TEST_CASE("cli: suite") {
  const fs::path out = scratch("suite_out");
  const std::string o = " --out '" + out.string() + "'";
  CHECK(cli("suite '" + kCorpus.string() + "'" + o) == 0);
  REQUIRE(fs::exists(out / "suite_summary.json"));
  const Json summary = Json::parse(slurp(out / "suite_summary.json"));
  CHECK(summary["passed"].get<std::size_t>() == corpus_files().size());

  SUBCASE("one injected failure") {
    const fs::path dir = scratch("suite_fail");
    for (const auto& f : corpus_files()) fs::copy_file(f, dir / f.filename());
    Json doc = Json::parse(slurp(dir / "obs_equivalence_default.json"));
    doc["payload"]["expected_do"][0] = 0.1;
    spit(dir / "obs_equivalence_default.json", doc.dump(2));
    CHECK(cli("suite '" + dir.string() + "'" + o) == 1);
    const auto sum = run_suite(dir, out, {}, ReportFormat::Json);
    CHECK(sum.failed == 1);
    CHECK(sum.errors == 0);
    CHECK(sum.passed == corpus_files().size() - 1);
  }
  SUBCASE("one unreadable scenario") {
    const fs::path dir = scratch("suite_error");
    fs::copy_file(kCorpus / "cap_drift.json", dir / "cap_drift.json");
    spit(dir / "broken.json", "[1, 2");
    CHECK(cli("suite '" + dir.string() + "'" + o) == 2);
  }
  SUBCASE("missing or empty directory") {
    CHECK(cli("suite '" + (out / "nope").string() + "'" + o) == 2);
    CHECK(cli("suite '" + scratch("suite_empty").string() + "'" + o) == 2);
    CHECK_THROWS_AS(run_suite(scratch("suite_empty2"), out, {}, ReportFormat::Json), Error);
  }
}
