#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace mechdiag {

using Json = nlohmann::ordered_json;

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr int kReportSchemaVersion = 1;

enum class Comparison { AtMost, AtLeast };

struct Check {
  std::string name;
  std::string anchor;  // stable identifier of the claim being checked
  std::string tolerance_key;
  double measured = 0.0;
  double threshold = 0.0;
  Comparison comparison = Comparison::AtMost;

  // NaN never passes.
  bool passed() const;
};

struct Table {
  std::string name;
  std::vector<std::string> columns;
  std::vector<std::vector<Json>> rows;
};

// Scenario-level overrides of module default thresholds.
class Tolerances {
 public:
  Tolerances() = default;
  explicit Tolerances(std::map<std::string, double> values) : values_(std::move(values)) {}

  double get(const std::string& key, double fallback) const;
  void set(const std::string& key, double value) { values_[key] = value; }
  const std::map<std::string, double>& values() const { return values_; }

 private:
  std::map<std::string, double> values_;
};

struct DiagnosticReport {
  std::string scenario_id;
  std::string scenario_hash;
  std::string kind;
  std::uint64_t seed = 0;
  std::vector<Check> checks;
  std::vector<Table> tables;
  std::vector<std::string> notes;

  Check& add_check(std::string name, std::string anchor, std::string tolerance_key, double measured,
                   double threshold, Comparison comparison);
  // Threshold looked up in `tol` under `tolerance_key`, defaulting to `fallback`.
  Check& add_check(std::string name, std::string anchor, const std::string& tolerance_key,
                   double measured, const Tolerances& tol, double fallback, Comparison comparison);
  Table& add_table(std::string name, std::vector<std::string> columns);
  // Appends checks, tables and notes from `other`, prefixing names.
  void merge(const DiagnosticReport& other, const std::string& prefix);

  bool passed() const;
  std::size_t failed_count() const;
};

Json report_to_json(const DiagnosticReport& report);

// Deterministic text form: two-space indent, doubles with 17 significant digits.
std::string emit_json(const Json& value);

std::string checks_csv(const DiagnosticReport& report);
std::string table_csv(const Table& table);

std::string fnv1a64_hex(std::string_view bytes);

}  // namespace mechdiag
