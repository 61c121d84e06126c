#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mlmbic/dataio.hpp"

namespace mlmbic {

// Parameters of y_j = X_j beta + Z_j b_j + e_j, b_j ~ N(0, psi), e_j ~ N(0, sigma2 I).
struct Theta {
  Eigen::VectorXd beta;
  Eigen::MatrixXd psi;
  double sigma2 = 1.0;

  /// Throws std::invalid_argument on dimension mismatch, asymmetric or
  /// indefinite psi, or non-positive sigma2.
  void validate(Eigen::Index p, Eigen::Index q) const;
};

struct FitOptions {
  int max_iterations = 500;
  double rel_tol = 1e-10;   // relative log-likelihood change
  double grad_tol = 1e-6;   // gradient norm in optimizer coordinates
  double boundary_tol = 1e-8;  // squared Cholesky pivot relative to var(y)
};

struct FitResult {
  Theta theta_hat;
  double loglik = 0.0;
  double deviance = 0.0;
  bool converged = false;
  double gradient_norm = 0.0;
  std::vector<bool> boundary_flags;  // one per diagonal entry of psi
  int iterations = 0;
  std::string message;
};

/// Dense V = Z psi Z' + sigma2 I. Oracle and small-case helper only.
Eigen::MatrixXd marginal_cov(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& psi,
                             double sigma2);

double log_likelihood(const DesignSet& designs, const Theta& theta);

/// Score in natural coordinates, ordered (beta, vech psi, sigma2).
Eigen::VectorXd score(const DesignSet& designs, const Theta& theta);

/// GLS estimate of beta for fixed (psi, sigma2).
Eigen::VectorXd gls_beta(const DesignSet& designs, const Eigen::MatrixXd& psi, double sigma2);

/// Log-likelihood maximized over beta for fixed (psi, sigma2).
double profiled_log_likelihood(const DesignSet& designs, const Eigen::MatrixXd& psi,
                               double sigma2);

/// Deterministic starting values: OLS beta, pooled within-cluster sigma2 and
/// a moment estimate of psi from per-cluster least-squares coefficients.
Theta initial_theta(const DesignSet& designs);

FitResult fit_ml(const DesignSet& designs, const std::optional<Theta>& init = std::nullopt,
                 const FitOptions& options = {});

/// tau0^2 / (tau0^2 + sigma2) for a random-intercept model.
double icc(const Theta& theta);

}  // namespace mlmbic
