#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "mlmbic/bic.hpp"
#include "mlmbic/dataio.hpp"
#include "mlmbic/lmmfit.hpp"

namespace mlmbic {

// A: random intercept and slope of the within-cluster covariate.
// B: random intercept only.
enum class ModelKind { A, B };

ModelKind parse_model_kind(std::string_view name);
const char* to_string(ModelKind kind);

struct DemoConfig {
  ModelKind model = ModelKind::B;
  Eigen::Vector3d beta{57.98, 1.93, -14.57};
  double tau0sq = 40.20;
  double tau1sq = 21.58;
  std::vector<double> correlations{-1.0, -0.8, -0.6, -0.4, -0.2, 0.0};
  std::vector<double> sigma2_levels{42.78, 10.0, 1.0};
  std::vector<int> n_grid{10, 20, 40};
  std::vector<int> J_grid{50, 100, 200, 400};
  double x_within_sd = 2.07;
  double x_between_mean = 0.0;
  double x_between_var = 1.0;
  std::uint64_t seed = 7;
  unsigned threads = 0;

  /// Throws std::invalid_argument for empty grids, out-of-range values or
  /// any (n, J) with J < n + 5.
  void validate() const;

  /// Generating parameters for one (corr, sigma2) cell; corr is ignored for B.
  Theta theta0(double corr, double sigma2) const;
};

/// Columns of `raw` are shifted and linearly mixed so that the sample mean is
/// `mean` and the sample covariance (denominator rows) is `cov` exactly.
/// `cov` may be singular. Throws if the sample covariance of `raw` is singular.
Eigen::MatrixXd moment_match(const Eigen::MatrixXd& raw, const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov);

// Layout of the per-cluster moment-matched vector:
//   (x_j, b_0j[, b_1j], e_1j, ..., e_nj)
// Every cluster shares the within-cluster covariate pattern x_ij = w_i, which
// has mean 0 and standard deviation x_within_sd (denominator n - 1).
struct MomentMatchedSample {
  Dataset data;             // columns y, x, xb; group "cluster"
  Eigen::MatrixXd block;    // J x (n + 2) for B, J x (n + 3) for A
  Eigen::VectorXd target_mean;
  Eigen::MatrixXd target_cov;
};

inline constexpr const char* kDemoGroup = "cluster";

/// theta0 has q = 1 (model B) or q = 2 (model A).
MomentMatchedSample gen_moment_matched(int J, int n, const Theta& theta0, double x_between_mean,
                                       double x_between_var, double x_within_sd,
                                       std::uint64_t seed);

/// Formula of the fitted model for the generated data.
ModelSpec demo_spec(ModelKind kind);

struct GridRow {
  int n = 0;
  int J = 0;
  double corr = 0.0;  // NaN for model B
  double sigma2 = 0.0;
  double logdet_bb = 0.0;
  double logdet_rr = 0.0;
};

/// Per-point generator seed from the config seed and the design coordinates.
std::uint64_t grid_seed(std::uint64_t seed, int n, int J);

/// One row per (corr, sigma2, n, J), information evaluated at the generating values.
std::vector<GridRow> demo_grid(const DemoConfig& config);

enum class Block { Fixed, Random };
const char* to_string(Block block);

struct RegressionResult {
  Block block = Block::Fixed;
  double intercept = 0.0;
  double coef_logn = 0.0;
  double coef_logJ = 0.0;
  double se_intercept = 0.0;
  double se_logn = 0.0;
  double se_logJ = 0.0;
  std::size_t points = 0;
};

/// OLS of the block log-determinant on (1, log n, log J) with classical SEs.
RegressionResult ols_regress(const std::vector<GridRow>& rows, Block block);

// Coefficients implied by the penalty counts at the generating parameters.
struct ExpectedCoefficients {
  double fixed_logn = 0.0;
  double fixed_logJ = 0.0;
  double random_logn = 0.0;
  double random_logJ = 0.0;
};

ExpectedCoefficients expected_coefficients(const PenaltyCount& counts);

struct CellRegression {
  double corr = 0.0;  // NaN for model B
  double sigma2 = 0.0;
  RegressionResult fixed;
  RegressionResult random;
  ExpectedCoefficients expected;
};

/// Groups rows by (corr, sigma2) in order of first appearance and regresses each block.
std::vector<CellRegression> regress_cells(const DemoConfig& config,
                                          const std::vector<GridRow>& rows);

void write_grid_csv(std::ostream& out, const std::vector<GridRow>& rows);
void write_regression_csv(std::ostream& out, const std::vector<CellRegression>& cells);
/// 2 x 2 panels (fixed/random block by log n/log J coefficient), one marker per
/// cell and horizontal lines at the expected coefficients.
void write_figure_svg(std::ostream& out, ModelKind kind, const std::vector<CellRegression>& cells);

}  // namespace mlmbic
