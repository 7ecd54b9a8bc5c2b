#include "mechdiag/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace mechdiag {

bool Check::passed() const {
  if (std::isnan(measured) || std::isnan(threshold)) return false;
  return comparison == Comparison::AtMost ? measured <= threshold : measured >= threshold;
}

double Tolerances::get(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

Check& DiagnosticReport::add_check(std::string name, std::string anchor, std::string tolerance_key,
                                   double measured, double threshold, Comparison comparison) {
  checks.push_back({std::move(name), std::move(anchor), std::move(tolerance_key), measured,
                    threshold, comparison});
  return checks.back();
}

Check& DiagnosticReport::add_check(std::string name, std::string anchor,
                                   const std::string& tolerance_key, double measured,
                                   const Tolerances& tol, double fallback, Comparison comparison) {
  return add_check(std::move(name), std::move(anchor), tolerance_key, measured,
                   tol.get(tolerance_key, fallback), comparison);
}

Table& DiagnosticReport::add_table(std::string name, std::vector<std::string> columns) {
  tables.push_back({std::move(name), std::move(columns), {}});
  return tables.back();
}

void DiagnosticReport::merge(const DiagnosticReport& other, const std::string& prefix) {
  for (Check c : other.checks) {
    c.name = prefix + c.name;
    checks.push_back(std::move(c));
  }
  for (Table t : other.tables) {
    t.name = prefix + t.name;
    tables.push_back(std::move(t));
  }
  for (const auto& n : other.notes) notes.push_back(prefix + n);
}

bool DiagnosticReport::passed() const { return failed_count() == 0; }

std::size_t DiagnosticReport::failed_count() const {
  std::size_t n = 0;
  for (const auto& c : checks) n += c.passed() ? 0 : 1;
  return n;
}

namespace {

Json number_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

}  // namespace

Json report_to_json(const DiagnosticReport& report) {
  Json out;
  out["report_schema_version"] = kReportSchemaVersion;
  out["scenario_id"] = report.scenario_id;
  out["scenario_hash"] = report.scenario_hash;
  out["kind"] = report.kind;
  out["toolkit_version"] = kToolkitVersion;
  out["seed"] = report.seed;
  out["verdict"] = report.passed() ? "pass" : "fail";
  out["failed_checks"] = report.failed_count();
  Json checks = Json::array();
  for (const auto& c : report.checks) {
    Json j;
    j["name"] = c.name;
    j["anchor"] = c.anchor;
    j["tolerance_key"] = c.tolerance_key;
    j["measured"] = number_or_null(c.measured);
    j["threshold"] = number_or_null(c.threshold);
    j["comparison"] = c.comparison == Comparison::AtMost ? "<=" : ">=";
    j["verdict"] = c.passed() ? "pass" : "fail";
    checks.push_back(std::move(j));
  }
  out["checks"] = std::move(checks);
  Json tables = Json::array();
  for (const auto& t : report.tables) {
    Json j;
    j["name"] = t.name;
    j["columns"] = t.columns;
    Json rows = Json::array();
    for (const auto& r : t.rows) {
      Json row = Json::array();
      for (const auto& cell : r) {
        row.push_back(cell.is_number_float() ? number_or_null(cell.get<double>()) : cell);
      }
      rows.push_back(std::move(row));
    }
    j["rows"] = std::move(rows);
    tables.push_back(std::move(j));
  }
  out["tables"] = std::move(tables);
  out["notes"] = report.notes;
  return out;
}

namespace {

std::string format_double(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  return Json(s).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

void emit(const Json& v, int indent, std::ostringstream& out) {
  const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
  const std::string inner(static_cast<std::size_t>(indent + 1) * 2, ' ');
  switch (v.type()) {
    case Json::value_t::object: {
      if (v.empty()) {
        out << "{}";
        return;
      }
      out << "{\n";
      bool first = true;
      for (auto it = v.begin(); it != v.end(); ++it) {
        if (!first) out << ",\n";
        first = false;
        out << inner << quote(it.key()) << ": ";
        emit(it.value(), indent + 1, out);
      }
      out << "\n" << pad << "}";
      return;
    }
    case Json::value_t::array: {
      if (v.empty()) {
        out << "[]";
        return;
      }
      // Arrays of scalars stay on one line so table rows remain readable.
      const bool flat = std::all_of(v.begin(), v.end(), [](const Json& e) { return e.is_primitive(); });
      if (flat) {
        out << "[";
        for (std::size_t i = 0; i < v.size(); ++i) {
          if (i) out << ", ";
          emit(v[i], indent + 1, out);
        }
        out << "]";
        return;
      }
      out << "[\n";
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out << ",\n";
        out << inner;
        emit(v[i], indent + 1, out);
      }
      out << "\n" << pad << "]";
      return;
    }
    case Json::value_t::number_float:
      out << format_double(v.get<double>());
      return;
    default:
      out << v.dump();
      return;
  }
}

std::string csv_cell(const Json& cell) {
  if (cell.is_number_float()) {
    const std::string s = format_double(cell.get<double>());
    return s == "null" ? "" : s;
  }
  if (cell.is_string()) {
    const std::string s = cell.get<std::string>();
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += '"';
      q += c;
    }
    return q + "\"";
  }
  if (cell.is_null()) return "";
  return cell.dump();
}

}  // namespace

std::string emit_json(const Json& value) {
  std::ostringstream out;
  emit(value, 0, out);
  out << "\n";
  return out.str();
}

std::string checks_csv(const DiagnosticReport& report) {
  Table t{"checks", {"name", "anchor", "tolerance_key", "measured", "threshold", "comparison", "verdict"}, {}};
  for (const auto& c : report.checks) {
    t.rows.push_back({c.name, c.anchor, c.tolerance_key, c.measured, c.threshold,
                      c.comparison == Comparison::AtMost ? "<=" : ">=", c.passed() ? "pass" : "fail"});
  }
  return table_csv(t);
}

std::string table_csv(const Table& table) {
  std::ostringstream out;
  for (std::size_t i = 0; i < table.columns.size(); ++i) {
    out << (i ? "," : "") << csv_cell(table.columns[i]);
  }
  out << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_cell(row[i]);
    out << "\n";
  }
  return out.str();
}

std::string fnv1a64_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mechdiag
