#pragma once

#include <map>
#include <string>
#include <vector>

namespace mechdiag {

// Exact finite joint distribution over named discrete variables. Storage is a
// dense grid over the per-variable supports, first variable most significant.
class DistributionTable {
 public:
  using Assignment = std::vector<double>;

  DistributionTable() = default;
  DistributionTable(std::vector<std::string> variables, std::vector<std::vector<double>> support,
                    std::vector<double> probabilities);

  // Builds the grid from a sparse atom map; grid size is capped at `max_cells`.
  static DistributionTable from_atoms(std::vector<std::string> variables,
                                      const std::map<Assignment, double>& atoms,
                                      std::size_t max_cells = 1'000'000);

  const std::vector<std::string>& variables() const { return variables_; }
  const std::vector<std::vector<double>>& support() const { return support_; }
  const std::vector<double>& probabilities() const { return probabilities_; }
  std::size_t size() const { return probabilities_.size(); }

  // Zero for assignments off the grid.
  double probability(const Assignment& assignment) const;
  Assignment assignment_at(std::size_t flat_index) const;
  std::map<Assignment, double> atoms() const;

  DistributionTable marginal(const std::vector<std::string>& query) const;

  // Half the L1 distance; both tables must carry the same variable list.
  double total_variation(const DistributionTable& other) const;

  double total_mass() const;

 private:
  std::vector<std::string> variables_;
  std::vector<std::vector<double>> support_;
  std::vector<double> probabilities_;
};

}  // namespace mechdiag
