#include "mechdiag/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "mechdiag/errors.hpp"
#include "scenario_internal.hpp"

namespace mechdiag {

namespace detail {

bool Reader::object(const Json& j, const std::string& path) {
  if (j.is_object()) return true;
  fail(path, "expected an object");
  return false;
}

bool Reader::array(const Json& j, const std::string& path) {
  if (j.is_array()) return true;
  fail(path, "expected an array");
  return false;
}

void Reader::keys(const Json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) return;
  for (const auto& [k, v] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      fail(at(path, k), "unknown field");
    }
  }
}

const Json* Reader::find(const Json& obj, const std::string& key) const {
  if (!obj.is_object()) return nullptr;
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

const Json* Reader::require(const Json& obj, const std::string& key, const std::string& path) {
  const Json* j = find(obj, key);
  if (!j) fail(at(path, key), "required field missing");
  return j;
}

double Reader::number_value(const Json& j, const std::string& path) {
  if (!j.is_number()) {
    fail(path, "expected a number");
    return 0.0;
  }
  const double v = j.get<double>();
  if (!std::isfinite(v)) fail(path, "not finite");
  return v;
}

std::string Reader::string_value(const Json& j, const std::string& path) {
  if (!j.is_string()) {
    fail(path, "expected a string");
    return {};
  }
  return j.get<std::string>();
}

double Reader::number(const Json& obj, const std::string& key, const std::string& path,
                      std::optional<double> fallback) {
  const Json* j = fallback ? find(obj, key) : require(obj, key, path);
  if (!j) return fallback.value_or(0.0);
  return number_value(*j, at(path, key));
}

std::int64_t Reader::integer(const Json& obj, const std::string& key, const std::string& path,
                             std::optional<std::int64_t> fallback, std::int64_t min) {
  const Json* j = fallback ? find(obj, key) : require(obj, key, path);
  if (!j) return fallback.value_or(0);
  if (!j->is_number_integer()) {
    fail(at(path, key), "expected an integer");
    return fallback.value_or(0);
  }
  const std::int64_t v = j->get<std::int64_t>();
  if (v < min) fail(at(path, key), "must be at least " + std::to_string(min));
  return v;
}

std::string Reader::string(const Json& obj, const std::string& key, const std::string& path,
                           std::optional<std::string> fallback) {
  const Json* j = fallback ? find(obj, key) : require(obj, key, path);
  if (!j) return fallback.value_or("");
  return string_value(*j, at(path, key));
}

bool Reader::boolean(const Json& obj, const std::string& key, const std::string& path, std::optional<bool> fallback) {
  const Json* j = fallback ? find(obj, key) : require(obj, key, path);
  if (!j) return fallback.value_or(false);
  if (!j->is_boolean()) {
    fail(at(path, key), "expected true or false");
    return false;
  }
  return j->get<bool>();
}

std::vector<double> Reader::numbers(const Json& obj, const std::string& key, const std::string& path,
                                    std::optional<std::vector<double>> fallback) {
  const Json* j = fallback ? find(obj, key) : require(obj, key, path);
  if (!j) return fallback.value_or(std::vector<double>{});
  std::vector<double> out;
  if (!array(*j, at(path, key))) return out;
  for (std::size_t i = 0; i < j->size(); ++i) out.push_back(number_value((*j)[i], at(at(path, key), i)));
  return out;
}

std::vector<std::string> Reader::strings(const Json& obj, const std::string& key, const std::string& path,
                                         std::optional<std::vector<std::string>> fallback) {
  const Json* j = fallback ? find(obj, key) : require(obj, key, path);
  if (!j) return fallback.value_or(std::vector<std::string>{});
  std::vector<std::string> out;
  if (!array(*j, at(path, key))) return out;
  for (std::size_t i = 0; i < j->size(); ++i) out.push_back(string_value((*j)[i], at(at(path, key), i)));
  return out;
}

void require_clean(const Reader& r) {
  if (r.ok()) return;
  std::string msg = "invalid scenario:";
  for (const auto& i : r.issues) msg += "\n  " + to_string(i);
  throw ValidationError(msg);
}

Comparison comparison_from(const std::string& text) {
  return text == "at_least" ? Comparison::AtLeast : Comparison::AtMost;
}

}  // namespace detail

const std::vector<std::string>& scenario_kinds() {
  static const std::vector<std::string> kinds{"scm-diagnostics", "obs-equivalence", "bayes-surgery",
                                              "cap-audit",       "forgetting",      "epistemics"};
  return kinds;
}

std::string to_string(const ScenarioIssue& issue) { return issue.path + ": " + issue.message; }

Scenario parse_scenario(std::string_view text) {
  Scenario s;
  try {
    s.document = Json::parse(text.begin(), text.end());
  } catch (const Json::parse_error& e) {
    std::size_t line = 1, column = 1;
    const std::size_t end = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
    throw SchemaError("parse error at line " + std::to_string(line) + ", column " + std::to_string(column) + ": " +
                          e.what(),
                      line, column);
  }
  s.hash = fnv1a64_hex(text);
  const Json& root = s.document;
  if (!root.is_object()) return s;
  s.schema_version = root.contains("schema_version") && root["schema_version"].is_number_integer()
                         ? root["schema_version"].get<int>()
                         : -1;
  if (root.contains("id") && root["id"].is_string()) s.id = root["id"].get<std::string>();
  if (root.contains("kind") && root["kind"].is_string()) s.kind = root["kind"].get<std::string>();
  if (root.contains("seed") && root["seed"].is_number_unsigned()) s.seed = root["seed"].get<std::uint64_t>();
  if (root.contains("tolerances") && root["tolerances"].is_object()) {
    for (const auto& [k, v] : root["tolerances"].items()) {
      if (v.is_number()) s.tolerances.set(k, v.get<double>());
    }
  }
  if (root.contains("payload")) s.payload = root["payload"];
  return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read scenario file: " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_scenario(buf.str());
}

std::vector<ScenarioIssue> validate_scenario(const Scenario& s) {
  detail::Reader r;
  const Json& root = s.document;
  if (!r.object(root, "$")) return r.issues;
  r.keys(root, "$", {"schema_version", "id", "kind", "seed", "description", "tolerances", "payload"});
  const std::int64_t version = r.integer(root, "schema_version", "$", std::nullopt, 0);
  if (r.ok() && version != kScenarioSchemaVersion) {
    r.fail("$.schema_version", "unsupported version " + std::to_string(version));
  }
  const std::string id = r.string(root, "id", "$", std::nullopt);
  static const std::regex id_pattern("[A-Za-z0-9_.-]+");
  if (root.contains("id") && root["id"].is_string() && !std::regex_match(id, id_pattern)) {
    r.fail("$.id", "use letters, digits, '_', '-' or '.'");
  }
  const std::string kind = r.string(root, "kind", "$", std::nullopt);
  const auto& kinds = scenario_kinds();
  const bool kind_ok = std::find(kinds.begin(), kinds.end(), kind) != kinds.end();
  if (root.contains("kind") && root["kind"].is_string() && !kind_ok) r.fail("$.kind", "unknown kind '" + kind + "'");
  if (const Json* seed = r.find(root, "seed"); seed && !seed->is_number_unsigned()) {
    r.fail("$.seed", "expected a nonnegative integer");
  }
  if (const Json* tol = r.find(root, "tolerances")) {
    if (r.object(*tol, "$.tolerances")) {
      for (const auto& [k, v] : tol->items()) r.number_value(v, "$.tolerances." + k);
    }
  }
  const Json* payload = r.require(root, "payload", "$");
  if (!payload || !r.object(*payload, "$.payload") || !kind_ok) return r.issues;
  if (kind == "scm-diagnostics") detail::check_scm_payload(r, *payload);
  if (kind == "obs-equivalence") detail::check_obs_payload(r, *payload);
  if (kind == "bayes-surgery") detail::check_bayes_payload(r, *payload);
  if (kind == "cap-audit") detail::check_cap_payload(r, *payload);
  if (kind == "forgetting") detail::check_forgetting_payload(r, *payload);
  if (kind == "epistemics") detail::check_epistemics_payload(r, *payload);
  return r.issues;
}

std::vector<ScenarioIssue> validate_scenario_text(std::string_view text) {
  try {
    return validate_scenario(parse_scenario(text));
  } catch (const SchemaError& e) {
    return {{"$", e.what()}};
  }
}

DiagnosticReport run_scenario(const Scenario& s, const RunOptions& options) {
  const auto issues = validate_scenario(s);
  if (!issues.empty()) {
    std::string msg = "invalid scenario:";
    for (const auto& i : issues) msg += "\n  " + to_string(i);
    throw ValidationError(msg);
  }
  detail::KindContext ctx;
  ctx.seed = options.seed.value_or(s.seed);
  ctx.tolerances = s.tolerances;
  for (const auto& [k, v] : options.tolerances) ctx.tolerances.set(k, v);
  const Json& payload = s.payload;
  DiagnosticReport rep;
  if (s.kind == "scm-diagnostics") rep = detail::run_scm_payload(payload, ctx);
  if (s.kind == "obs-equivalence") rep = detail::run_obs_payload(payload, ctx);
  if (s.kind == "bayes-surgery") rep = detail::run_bayes_payload(payload, ctx);
  if (s.kind == "cap-audit") rep = detail::run_cap_payload(payload, ctx);
  if (s.kind == "forgetting") rep = detail::run_forgetting_payload(payload, ctx);
  if (s.kind == "epistemics") rep = detail::run_epistemics_payload(payload, ctx);
  rep.scenario_id = s.id;
  rep.scenario_hash = s.hash;
  rep.kind = s.kind;
  rep.seed = ctx.seed;
  return rep;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

std::vector<std::filesystem::path> write_report(const DiagnosticReport& report, const std::filesystem::path& out_dir,
                                                ReportFormat format) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create output directory " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  if (format == ReportFormat::Json) {
    const auto path = out_dir / (report.scenario_id + ".json");
    write_file(path, emit_json(report_to_json(report)) + "\n");
    written.push_back(path);
    return written;
  }
  const auto checks = out_dir / (report.scenario_id + ".checks.csv");
  write_file(checks, checks_csv(report));
  written.push_back(checks);
  for (const auto& t : report.tables) {
    const auto path = out_dir / (report.scenario_id + "." + t.name + ".csv");
    write_file(path, table_csv(t));
    written.push_back(path);
  }
  return written;
}

Json suite_to_json(const SuiteSummary& summary) {
  Json out = Json::object();
  out["report_schema_version"] = kReportSchemaVersion;
  out["toolkit_version"] = kToolkitVersion;
  out["scenarios"] = summary.entries.size();
  out["passed"] = summary.passed;
  out["failed"] = summary.failed;
  out["errors"] = summary.errors;
  Json entries = Json::array();
  for (const auto& e : summary.entries) {
    Json j = Json::object();
    j["file"] = e.file;
    j["id"] = e.id;
    j["status"] = e.status;
    j["failed_checks"] = e.failed_checks;
    if (!e.message.empty()) j["message"] = e.message;
    entries.push_back(std::move(j));
  }
  out["entries"] = std::move(entries);
  return out;
}

SuiteSummary run_suite(const std::filesystem::path& corpus_dir, const std::filesystem::path& out_dir,
                       const RunOptions& options, ReportFormat format) {
  std::error_code ec;
  if (!std::filesystem::is_directory(corpus_dir, ec)) throw Error("corpus directory not found: " + corpus_dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(corpus_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw Error("no scenario files in " + corpus_dir.string());
  SuiteSummary summary;
  for (const auto& f : files) {
    SuiteEntry e;
    e.file = f.filename().string();
    try {
      const Scenario s = load_scenario(f);
      e.id = s.id;
      const DiagnosticReport rep = run_scenario(s, options);
      write_report(rep, out_dir, format);
      e.failed_checks = rep.failed_count();
      e.status = rep.passed() ? "pass" : "fail";
    } catch (const std::exception& ex) {
      e.status = "error";
      e.message = ex.what();
    }
    if (e.status == "pass") ++summary.passed;
    if (e.status == "fail") ++summary.failed;
    if (e.status == "error") ++summary.errors;
    summary.entries.push_back(std::move(e));
  }
  std::filesystem::create_directories(out_dir, ec);
  write_file(out_dir / "suite_summary.json", emit_json(suite_to_json(summary)) + "\n");
  return summary;
}

}  // namespace mechdiag
