#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace mlmbic {

/// Raised for unreadable tables, non-numeric cells, unknown variables and
/// invalid cluster structure.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Formula syntax error; `offset()` is the byte position in the input text.
class FormulaError : public std::runtime_error {
 public:
  FormulaError(const std::string& what, std::size_t offset);
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

enum class TableFormat { Csv, Whitespace };

TableFormat parse_table_format(std::string_view name);

struct Cluster {
  std::string label;
  std::vector<std::size_t> rows;  // in file order
};

// Numeric columns keyed by name plus a cluster partition of the rows.
// Clusters are ordered by first appearance of their label.
class Dataset {
 public:
  Dataset(std::map<std::string, std::vector<double>> columns,
          const std::vector<std::string>& cluster_ids);

  bool has_column(const std::string& name) const;
  const std::vector<double>& column(const std::string& name) const;
  std::vector<std::string> column_names() const;

  const std::vector<Cluster>& clusters() const noexcept { return clusters_; }
  std::size_t num_rows() const noexcept { return num_rows_; }
  std::size_t num_clusters() const noexcept { return clusters_.size(); }
  double mean_cluster_size() const noexcept {
    return static_cast<double>(num_rows_) / static_cast<double>(clusters_.size());
  }

 private:
  std::map<std::string, std::vector<double>> columns_;
  std::vector<Cluster> clusters_;
  std::size_t num_rows_ = 0;
};

Dataset read_table(std::istream& in, TableFormat format, const std::string& group);
Dataset load_table(const std::filesystem::path& path, TableFormat format,
                   const std::string& group);

// A model term: the intercept, a variable, or a two-way product.
struct Term {
  std::string first;   // empty for the intercept
  std::string second;  // non-empty only for interactions

  static Term intercept() { return {}; }
  static Term variable(std::string name) { return {std::move(name), {}}; }
  static Term interaction(std::string a, std::string b) {
    return {std::move(a), std::move(b)};
  }

  bool is_intercept() const noexcept { return first.empty(); }
  bool is_interaction() const noexcept { return !second.empty(); }
  std::string to_string() const;

  // a:b and b:a denote the same column.
  friend bool operator==(const Term& lhs, const Term& rhs);
};

struct ModelSpec {
  std::string response;
  std::vector<Term> fixed_terms;
  std::vector<Term> random_terms;
  std::string group;

  std::size_t p() const noexcept { return fixed_terms.size(); }
  std::size_t q() const noexcept { return random_terms.size(); }

  /// Canonical text, e.g. "y ~ 1 + x + (1 + x | g)". Re-parses to an equal spec.
  std::string to_string() const;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Grammar:
///   formula := ident "~" terms "+" "(" terms "|" ident ")"
///   terms   := term ("+" term)*
///   term    := "1" | ident | ident ":" ident
ModelSpec parse_formula(std::string_view text);

/// Parses a bare term list such as "1 + gender + gender:texp".
std::vector<Term> parse_terms(std::string_view text);

std::string format_terms(const std::vector<Term>& terms);

struct ClusterDesign {
  Eigen::MatrixXd X;  // n_j x p
  Eigen::MatrixXd Z;  // n_j x q
  Eigen::VectorXd y;  // n_j
};

// Per-cluster design matrices for one model. Every Z_j has full column rank.
class DesignSet {
 public:
  explicit DesignSet(std::vector<ClusterDesign> clusters);

  const std::vector<ClusterDesign>& clusters() const noexcept { return clusters_; }
  const ClusterDesign& operator[](std::size_t j) const { return clusters_[j]; }
  std::size_t num_clusters() const noexcept { return clusters_.size(); }
  std::size_t num_obs() const noexcept { return num_obs_; }
  Eigen::Index p() const noexcept { return p_; }
  Eigen::Index q() const noexcept { return q_; }
  double mean_cluster_size() const noexcept {
    return static_cast<double>(num_obs_) / static_cast<double>(clusters_.size());
  }

 private:
  std::vector<ClusterDesign> clusters_;
  std::size_t num_obs_ = 0;
  Eigen::Index p_ = 0;
  Eigen::Index q_ = 0;
};

/// Singular values below this fraction of the largest count as zero when
/// checking that each Z_j has full column rank.
inline constexpr double kDesignRankTolerance = 1e-10;

DesignSet build_designs(const Dataset& data, const ModelSpec& spec);

}  // namespace mlmbic
