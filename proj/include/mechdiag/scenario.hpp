#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mechdiag/report.hpp"

namespace mechdiag {

inline constexpr int kScenarioSchemaVersion = 1;

const std::vector<std::string>& scenario_kinds();

struct Scenario {
  int schema_version = kScenarioSchemaVersion;
  std::string id;
  std::string kind;
  std::uint64_t seed = 0;
  Tolerances tolerances;
  Json document;  // the whole parsed file
  Json payload;   // document["payload"], null when absent
  std::string hash;  // FNV-1a of the file bytes
};

// Raises SchemaError (with line and column) when the text is not JSON.
// Envelope problems are left for validate_scenario.
Scenario parse_scenario(std::string_view text);
Scenario load_scenario(const std::filesystem::path& path);

struct ScenarioIssue {
  std::string path;  // e.g. payload.model.mechanisms[1].primitive
  std::string message;
};

std::string to_string(const ScenarioIssue& issue);

// Envelope and kind-specific payload checks. Empty when the scenario can run.
std::vector<ScenarioIssue> validate_scenario(const Scenario& scenario);
// Parses the text as well; parse failures become a single issue at "$".
std::vector<ScenarioIssue> validate_scenario_text(std::string_view text);

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::map<std::string, double> tolerances;  // override the scenario's own
};

// Raises ValidationError when the scenario does not validate.
DiagnosticReport run_scenario(const Scenario& scenario, const RunOptions& options = {});

enum class ReportFormat { Json, Csv };

// JSON: <out>/<id>.json. CSV: <out>/<id>.checks.csv plus <out>/<id>.<table>.csv.
// Returns the written paths.
std::vector<std::filesystem::path> write_report(const DiagnosticReport& report, const std::filesystem::path& out_dir,
                                                ReportFormat format);

struct SuiteEntry {
  std::string file;
  std::string id;
  std::string status;  // pass | fail | error
  std::size_t failed_checks = 0;
  std::string message;
};

struct SuiteSummary {
  std::vector<SuiteEntry> entries;
  std::size_t passed = 0;
  std::size_t failed = 0;
  std::size_t errors = 0;
};

// Runs every *.json file in `corpus_dir` in name order, writing reports and
// suite_summary.json into `out_dir`. Raises Error when the directory is missing
// or holds no scenarios.
SuiteSummary run_suite(const std::filesystem::path& corpus_dir, const std::filesystem::path& out_dir,
                       const RunOptions& options, ReportFormat format);
Json suite_to_json(const SuiteSummary& summary);

}  // namespace mechdiag
