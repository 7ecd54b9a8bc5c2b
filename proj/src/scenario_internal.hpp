#pragma once

#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "mechdiag/report.hpp"
#include "mechdiag/scenario.hpp"

namespace mechdiag::detail {

// Collects field-path issues while reading a payload.
class Reader {
 public:
  std::vector<ScenarioIssue> issues;

  void fail(const std::string& path, std::string message) { issues.push_back({path, std::move(message)}); }
  bool ok() const { return issues.empty(); }

  static std::string at(const std::string& path, const std::string& key) { return path + "." + key; }
  static std::string at(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

  bool object(const Json& j, const std::string& path);
  bool array(const Json& j, const std::string& path);
  // Flags keys outside `allowed`.
  void keys(const Json& obj, const std::string& path, std::initializer_list<const char*> allowed);

  const Json* find(const Json& obj, const std::string& key) const;
  const Json* require(const Json& obj, const std::string& key, const std::string& path);

  double number(const Json& obj, const std::string& key, const std::string& path, std::optional<double> fallback);
  std::int64_t integer(const Json& obj, const std::string& key, const std::string& path,
                       std::optional<std::int64_t> fallback, std::int64_t min = 0);
  std::string string(const Json& obj, const std::string& key, const std::string& path,
                     std::optional<std::string> fallback);
  bool boolean(const Json& obj, const std::string& key, const std::string& path, std::optional<bool> fallback);
  std::vector<double> numbers(const Json& obj, const std::string& key, const std::string& path,
                              std::optional<std::vector<double>> fallback);
  std::vector<std::string> strings(const Json& obj, const std::string& key, const std::string& path,
                                   std::optional<std::vector<std::string>> fallback);

  double number_value(const Json& j, const std::string& path);
  std::string string_value(const Json& j, const std::string& path);
};

// Raises ValidationError listing the reader's issues, if any.
void require_clean(const Reader& r);

struct KindContext {
  std::uint64_t seed = 0;
  Tolerances tolerances;
};

void check_scm_payload(Reader& r, const Json& payload);
DiagnosticReport run_scm_payload(const Json& payload, const KindContext& ctx);
void check_obs_payload(Reader& r, const Json& payload);
DiagnosticReport run_obs_payload(const Json& payload, const KindContext& ctx);
void check_bayes_payload(Reader& r, const Json& payload);
DiagnosticReport run_bayes_payload(const Json& payload, const KindContext& ctx);
void check_cap_payload(Reader& r, const Json& payload);
DiagnosticReport run_cap_payload(const Json& payload, const KindContext& ctx);
void check_forgetting_payload(Reader& r, const Json& payload);
DiagnosticReport run_forgetting_payload(const Json& payload, const KindContext& ctx);
void check_epistemics_payload(Reader& r, const Json& payload);
DiagnosticReport run_epistemics_payload(const Json& payload, const KindContext& ctx);

// Expectation check helpers shared by the kinds.
Comparison comparison_from(const std::string& text);

}  // namespace mechdiag::detail
