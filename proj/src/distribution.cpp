#include "mechdiag/distribution.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mechdiag/errors.hpp"

namespace mechdiag {

namespace {
constexpr double kMassTolerance = 1e-12;
}

DistributionTable::DistributionTable(std::vector<std::string> variables,
                                     std::vector<std::vector<double>> support,
                                     std::vector<double> probabilities)
    : variables_(std::move(variables)), support_(std::move(support)),
      probabilities_(std::move(probabilities)) {
  if (variables_.size() != support_.size()) {
    throw ShapeError("distribution table: one support list per variable required");
  }
  std::size_t cells = 1;
  for (const auto& s : support_) {
    if (s.empty()) throw ShapeError("distribution table: empty support");
    if (!std::is_sorted(s.begin(), s.end()) ||
        std::adjacent_find(s.begin(), s.end()) != s.end()) {
      throw ShapeError("distribution table: support must be strictly increasing");
    }
    cells *= s.size();
  }
  if (cells != probabilities_.size()) throw ShapeError("distribution table: grid size mismatch");
  for (double p : probabilities_) {
    if (!(p >= 0.0)) throw ValidationError("distribution table: negative or NaN probability");
  }
  if (std::abs(total_mass() - 1.0) > kMassTolerance) {
    throw ValidationError("distribution table: probabilities do not sum to 1");
  }
}

DistributionTable DistributionTable::from_atoms(std::vector<std::string> variables,
                                                const std::map<Assignment, double>& atoms,
                                                std::size_t max_cells) {
  std::vector<std::set<double>> seen(variables.size());
  for (const auto& [assignment, p] : atoms) {
    if (assignment.size() != variables.size()) throw ShapeError("atom arity mismatch");
    for (std::size_t v = 0; v < assignment.size(); ++v) seen[v].insert(assignment[v]);
  }
  std::vector<std::vector<double>> support;
  std::size_t cells = 1;
  for (const auto& s : seen) {
    if (s.empty()) throw ShapeError("distribution table: no atoms");
    support.emplace_back(s.begin(), s.end());
    if (cells > max_cells / s.size()) {
      throw CapacityError("joint support exceeds " + std::to_string(max_cells) + " assignments");
    }
    cells *= s.size();
  }
  std::vector<double> probs(cells, 0.0);
  DistributionTable shape;
  shape.variables_ = variables;
  shape.support_ = support;
  for (const auto& [assignment, p] : atoms) {
    std::size_t index = 0;
    for (std::size_t v = 0; v < assignment.size(); ++v) {
      const auto& s = support[v];
      index = index * s.size() +
              static_cast<std::size_t>(std::lower_bound(s.begin(), s.end(), assignment[v]) - s.begin());
    }
    probs[index] += p;
  }
  return DistributionTable(std::move(variables), std::move(support), std::move(probs));
}

double DistributionTable::probability(const Assignment& assignment) const {
  if (assignment.size() != variables_.size()) throw ShapeError("assignment arity mismatch");
  std::size_t index = 0;
  for (std::size_t v = 0; v < assignment.size(); ++v) {
    const auto& s = support_[v];
    const auto it = std::lower_bound(s.begin(), s.end(), assignment[v]);
    if (it == s.end() || *it != assignment[v]) return 0.0;
    index = index * s.size() + static_cast<std::size_t>(it - s.begin());
  }
  return probabilities_[index];
}

DistributionTable::Assignment DistributionTable::assignment_at(std::size_t flat_index) const {
  Assignment a(variables_.size());
  for (std::size_t v = variables_.size(); v-- > 0;) {
    const auto& s = support_[v];
    a[v] = s[flat_index % s.size()];
    flat_index /= s.size();
  }
  return a;
}

std::map<DistributionTable::Assignment, double> DistributionTable::atoms() const {
  std::map<Assignment, double> out;
  for (std::size_t i = 0; i < probabilities_.size(); ++i) {
    if (probabilities_[i] > 0.0) out[assignment_at(i)] += probabilities_[i];
  }
  return out;
}

DistributionTable DistributionTable::marginal(const std::vector<std::string>& query) const {
  std::vector<std::size_t> positions;
  for (const auto& name : query) {
    const auto it = std::find(variables_.begin(), variables_.end(), name);
    if (it == variables_.end()) throw ValidationError("unknown variable in query: " + name);
    positions.push_back(static_cast<std::size_t>(it - variables_.begin()));
  }
  std::map<Assignment, double> reduced;
  for (std::size_t i = 0; i < probabilities_.size(); ++i) {
    if (probabilities_[i] == 0.0) continue;
    const Assignment full = assignment_at(i);
    Assignment part;
    part.reserve(positions.size());
    for (std::size_t p : positions) part.push_back(full[p]);
    reduced[part] += probabilities_[i];
  }
  return from_atoms(query, reduced);
}

double DistributionTable::total_variation(const DistributionTable& other) const {
  if (variables_ != other.variables_) {
    throw ShapeError("total variation requires identical variable lists");
  }
  auto a = atoms();
  const auto b = other.atoms();
  double l1 = 0.0;
  for (const auto& [assignment, p] : b) {
    const auto it = a.find(assignment);
    if (it == a.end()) {
      l1 += p;
    } else {
      l1 += std::abs(it->second - p);
      a.erase(it);
    }
  }
  for (const auto& [assignment, p] : a) l1 += p;
  return 0.5 * l1;
}

double DistributionTable::total_mass() const {
  double s = 0.0;
  for (double p : probabilities_) s += p;
  return s;
}

}  // namespace mechdiag
