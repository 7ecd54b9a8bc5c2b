#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mechdiag/errors.hpp"
#include "mechdiag/scenario.hpp"

using namespace mechdiag;

namespace {

constexpr int kExitPass = 0;
constexpr int kExitFail = 1;
constexpr int kExitError = 2;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string format = "json";
  std::vector<std::string> tolerances;
};

std::string default_out() {
  if (const char* env = std::getenv("MECHDIAG_OUT"); env && *env) return env;
  return "mechdiag-out";
}

RunOptions run_options(const Common& c) {
  RunOptions o;
  o.seed = c.seed;
  for (const auto& kv : c.tolerances) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("--tolerance expects KEY=VALUE, got '" + kv + "'");
    const std::string value = kv.substr(eq + 1);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size()) throw Error("--tolerance value is not a number: '" + value + "'");
    o.tolerances[kv.substr(0, eq)] = v;
  }
  return o;
}

ReportFormat report_format(const Common& c) { return c.format == "csv" ? ReportFormat::Csv : ReportFormat::Json; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_validate(const std::vector<std::string>& files) {
  int code = kExitPass;
  for (const auto& f : files) {
    try {
      const Scenario s = load_scenario(f);
      const auto issues = validate_scenario(s);
      if (issues.empty()) {
        std::cout << f << ": valid (" << s.kind << ")\n";
        continue;
      }
      code = kExitError;
      std::cout << f << ": " << issues.size() << " issue(s)\n";
      for (const auto& i : issues) std::cout << "  " << to_string(i) << "\n";
    } catch (const SchemaError& e) {
      code = kExitError;
      std::cout << f << ":" << e.line() << ":" << e.column() << ": " << e.what() << "\n";
    } catch (const std::exception& e) {
      code = kExitError;
      std::cerr << f << ": " << e.what() << "\n";
    }
  }
  return code;
}

int cmd_run(const std::string& file, const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const Scenario s = load_scenario(file);
    const DiagnosticReport rep = run_scenario(s, run_options(c));
    const auto written = write_report(rep, c.out, report_format(c));
    for (const auto& ch : rep.checks) {
      std::cout << (ch.passed() ? "PASS " : "FAIL ") << ch.name << "  measured=" << Json(ch.measured).dump()
                << (ch.comparison == Comparison::AtMost ? " <= " : " >= ") << Json(ch.threshold).dump() << "\n";
    }
    std::cout << rep.scenario_id << ": " << (rep.passed() ? "pass" : "fail") << " (" << rep.failed_count() << " of "
              << rep.checks.size() << " checks failed)\n";
    for (const auto& p : written) std::cout << "wrote " << p.string() << "\n";
    std::cerr << "elapsed " << seconds_since(t0) << " s\n";
    return rep.passed() ? kExitPass : kExitFail;
  } catch (const SchemaError& e) {
    std::cerr << file << ":" << e.line() << ":" << e.column() << ": " << e.what() << "\n";
  } catch (const std::exception& e) {
    std::cerr << file << ": " << e.what() << "\n";
  }
  return kExitError;
}

int cmd_suite(const std::string& dir, const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const SuiteSummary sum = run_suite(dir, c.out, run_options(c), report_format(c));
    for (const auto& e : sum.entries) {
      std::cout << e.status << "  " << e.file;
      if (e.status == "fail") std::cout << "  (" << e.failed_checks << " failed checks)";
      if (e.status == "error") std::cout << "  " << e.message;
      std::cout << "\n";
    }
    std::cout << "passed " << sum.passed << ", failed " << sum.failed << ", errors " << sum.errors << " of "
              << sum.entries.size() << "\n";
    std::cerr << "elapsed " << seconds_since(t0) << " s\n";
    if (sum.errors > 0) return kExitError;
    return sum.failed > 0 ? kExitFail : kExitPass;
  } catch (const std::exception& e) {
    std::cerr << "suite: " << e.what() << "\n";
  }
  return kExitError;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Override the scenario seed");
  cmd->add_option("--out", c.out, "Report directory (default $MECHDIAG_OUT or ./mechdiag-out)");
  cmd->add_option("--format", c.format, "Report format")->check(CLI::IsMember({"json", "csv"}));
  cmd->add_option("--tolerance", c.tolerances, "Threshold override KEY=VALUE (repeatable)")
      ->allow_extra_args(false)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scenario runner for mechanism diagnostics"};
  app.set_version_flag("--version", std::string(kToolkitVersion));
  app.require_subcommand(1);

  std::vector<std::string> validate_files;
  auto* validate = app.add_subcommand("validate", "Check scenario files against the schema");
  validate->add_option("files", validate_files, "Scenario files")->required();

  Common run_opts;
  std::string run_file;
  auto* run = app.add_subcommand("run", "Run one scenario and write its report");
  run->add_option("scenario", run_file, "Scenario file")->required();
  add_common(run, run_opts);

  Common suite_opts;
  std::string suite_dir;
  auto* suite = app.add_subcommand("suite", "Run every scenario in a directory");
  suite->add_option("corpus", suite_dir, "Corpus directory")->required();
  add_common(suite, suite_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitPass : kExitError;
  }
  if (run_opts.out.empty()) run_opts.out = default_out();
  if (suite_opts.out.empty()) suite_opts.out = default_out();

  if (*validate) return cmd_validate(validate_files);
  if (*run) return cmd_run(run_file, run_opts);
  return cmd_suite(suite_dir, suite_opts);
}
