#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mlmbic/dataio.hpp"
#include "mlmbic/lmmfit.hpp"

namespace mlmbic {

/// Eigenvalues at or below this fraction of the largest count as zero, both
/// for rank(psi) and for the intersection dimension.
inline constexpr double kRankTolerance = 1e-8;

/// A full-rank psi whose smallest/largest eigenvalue ratio falls below this
/// is reported as close to singular.
inline constexpr double kNearSingularRatio = 1e-4;

struct PenaltyCount {
  int p = 0;
  int q = 0;
  int q_star = 0;
  int p2 = 0;  // fixed columns inside the random-effect column space
  int p1 = 0;
  int q1 = 0;  // rank of psi
  int q2 = 0;
  int q2_star = 0;
  int K = 0;
  int K1 = 0;  // parameters penalized by log N
  int K2 = 0;  // parameters penalized by log J; negative in some singular cases
  bool singular = false;
};

struct PsiRank {
  int q1 = 0;
  Eigen::MatrixXd U1;           // q x q1, orthonormal
  Eigen::VectorXd eigenvalues;  // ascending
};

PsiRank rank_psi(const Eigen::MatrixXd& psi_hat, double tol = kRankTolerance);

/// p - rank(sum_j E_j'E_j / N) with E_j the part of X_j orthogonal to the
/// columns of Z_j (or of Z_j * z_basis when given).
int intersection_dim(const DesignSet& designs, const Eigen::MatrixXd* z_basis = nullptr,
                     double tol = kRankTolerance);

PenaltyCount count_penalty(const DesignSet& designs, const Eigen::MatrixXd& psi_hat,
                           double tol = kRankTolerance);

struct BicValues {
  double bic_e = 0.0;
  double bic_n = 0.0;
  double bic_j = 0.0;
};

BicValues bic_all(double deviance, int K1, int K2, double N, double J);
BicValues bic_all(double deviance, const PenaltyCount& counts, double N, double J);

struct TermSet {
  std::string label;
  std::vector<Term> terms;
};

struct CandidateResult {
  std::string label;  // e.g. "F5+V1"
  std::string fixed_label;
  std::string random_label;
  ModelSpec spec;
  bool ok = false;
  std::string error;
  FitResult fit;
  PenaltyCount counts;
  BicValues bic;
  int rank_e = 0;  // 1-based; 0 when the candidate failed
  int rank_n = 0;
  int rank_j = 0;
  std::vector<std::string> warnings;
};

struct BicReport {
  std::size_t N = 0;
  std::size_t J = 0;
  std::vector<CandidateResult> candidates;  // fixed-major order
};

struct SelectOptions {
  double rank_tol = kRankTolerance;
  FitOptions fit;
  unsigned threads = 0;  // 0: MLMBIC_THREADS or hardware concurrency
};

/// Fits every fixed x random combination and ranks them under each criterion.
/// Ties are broken by smaller K, then by position in the candidate list.
BicReport enumerate_and_rank(const Dataset& data, const std::string& response,
                             const std::string& group, const std::vector<TermSet>& fixed_sets,
                             const std::vector<TermSet>& random_sets,
                             const SelectOptions& options = {});

void write_report_json(std::ostream& out, const BicReport& report);
void write_report_csv(std::ostream& out, const BicReport& report);
/// Human-readable ranked table; one decimal for deviance and BIC values.
void print_report_table(std::ostream& out, const BicReport& report);

}  // namespace mlmbic
