#pragma once

#include <stdexcept>
#include <utility>

#include <Eigen/Dense>

#include "mlmbic/dataio.hpp"

namespace mlmbic {

struct Theta;

// Cross-products of one cluster's designs. The marginal covariance
// V = Z Psi Z' + sigma2 I is never formed; every quantity goes through
//   M = sigma2 (Z'Z)^{-1} + Psi = (sigma2 / n) S_ZZ^{-1} + Psi,
// which stays positive definite for sigma2 > 0 even when Psi is singular.
class ClusterWorkspace {
 public:
  explicit ClusterWorkspace(const ClusterDesign& design);

  Eigen::Index n() const noexcept { return n_; }
  Eigen::Index p() const noexcept { return ztx_.cols(); }
  Eigen::Index q() const noexcept { return ztz_.rows(); }

  // Scaled cross-products X'X/n, X'Z/n, Z'Z/n.
  Eigen::MatrixXd S_XX() const { return xtx_ / static_cast<double>(n_); }
  Eigen::MatrixXd S_XZ() const { return ztx_.transpose() / static_cast<double>(n_); }
  Eigen::MatrixXd S_ZZ() const { return ztz_ / static_cast<double>(n_); }

  const Eigen::MatrixXd& ztz() const noexcept { return ztz_; }
  const Eigen::MatrixXd& ztz_inv() const noexcept { return ztz_inv_; }
  double logdet_ztz() const noexcept { return logdet_ztz_; }
  // (Z'Z)^{-1} Z'X: coefficients of X regressed on Z.
  const Eigen::MatrixXd& proj_x() const noexcept { return proj_x_; }
  // X'(I - P_Z)X: the part of X'X orthogonal to the columns of Z.
  const Eigen::MatrixXd& within_xx() const noexcept { return within_xx_; }

  /// Sets (Psi, sigma2) and factorizes M. Must be called before the accessors below.
  void set_covariance(const Eigen::MatrixXd& psi, double sigma2);

  double sigma2() const noexcept { return sigma2_; }
  const Eigen::LLT<Eigen::MatrixXd>& m_factor() const noexcept { return m_llt_; }
  const Eigen::MatrixXd& m_inv() const noexcept { return m_inv_; }
  double logdet_m() const noexcept { return logdet_m_; }

  /// log|V| by the determinant lemma: (n - q) log sigma2 + log|M| + log|Z'Z|.
  double logdet_v() const;
  /// X'V^{-1}X.
  Eigen::MatrixXd xt_vinv_x() const;

 private:
  Eigen::Index n_;
  Eigen::MatrixXd xtx_, ztx_, ztz_, ztz_inv_, proj_x_, within_xx_;
  double logdet_ztz_ = 0.0;

  double sigma2_ = 0.0;
  Eigen::LLT<Eigen::MatrixXd> m_llt_;
  Eigen::MatrixXd m_inv_;
  double logdet_m_ = 0.0;
};

/// V^{-1} B for V = Z Psi Z' + sigma2 I, without forming V.
Eigen::MatrixXd woodbury_apply(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& psi,
                               double sigma2, const Eigen::MatrixXd& B);

/// q^2 x q(q+1)/2 matrix D with D vech(A) = vec(A) for symmetric A.
Eigen::MatrixXd duplication_matrix(Eigen::Index q);

/// Column-major lower triangle: (1,1), (2,1), ..., (q,1), (2,2), ...
Eigen::VectorXd vech(const Eigen::MatrixXd& a);
Eigen::MatrixXd unvech(const Eigen::VectorXd& v, Eigen::Index q);

inline Eigen::Index num_vech(Eigen::Index q) { return q * (q + 1) / 2; }

struct InfoBlocks {
  Eigen::MatrixXd I_bb;  // p x p
  Eigen::MatrixXd I_rr;  // (q*+1) x (q*+1), ordered (vech Psi, sigma2)
  double logdet_bb = 0.0;
  double logdet_rr = 0.0;
};

/// Thrown by logdet_blocks when a block is not numerically positive definite.
class SingularBlockError : public std::runtime_error {
 public:
  SingularBlockError(const char* block, double smallest_eigenvalue);
  double smallest_eigenvalue() const noexcept { return smallest_; }

 private:
  double smallest_;
};

Eigen::MatrixXd info_fixed(const DesignSet& designs, const Theta& theta);
Eigen::MatrixXd info_random(const DesignSet& designs, const Theta& theta);

/// Both blocks plus their log-determinants (Cholesky of each block).
/// Throws SingularBlockError if either block is not positive definite.
InfoBlocks logdet_blocks(const DesignSet& designs, const Theta& theta);

// Per-cluster contributions; exposed for the demonstration code and tests.
Eigen::MatrixXd cluster_info_fixed(const ClusterWorkspace& ws);
Eigen::MatrixXd cluster_info_random(const ClusterWorkspace& ws);

}  // namespace mlmbic
