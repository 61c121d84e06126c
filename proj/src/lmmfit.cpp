#include "mlmbic/lmmfit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "mlmbic/fisher.hpp"

namespace mlmbic {

void Theta::validate(Eigen::Index p, Eigen::Index q) const {
  if (beta.size() != p) {
    throw std::invalid_argument("beta has " + std::to_string(beta.size()) +
                                " entries, expected " + std::to_string(p));
  }
  if (psi.rows() != q || psi.cols() != q) {
    throw std::invalid_argument("psi must be " + std::to_string(q) + "x" + std::to_string(q));
  }
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2)) {
    throw std::invalid_argument("sigma2 must be positive and finite");
  }
  if (!psi.allFinite()) throw std::invalid_argument("psi has non-finite entries");
  double scale = std::max(1.0, psi.cwiseAbs().maxCoeff());
  if ((psi - psi.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw std::invalid_argument("psi is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(psi, Eigen::EigenvaluesOnly);
  if (q > 0 && es.eigenvalues()(0) < -1e-10 * std::max(psi.trace(), 1e-300)) {
    throw std::invalid_argument("psi is not positive semidefinite");
  }
}

Eigen::MatrixXd marginal_cov(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& psi,
                             double sigma2) {
  if (Z.cols() != psi.rows() || psi.rows() != psi.cols()) {
    throw std::invalid_argument("marginal_cov: Z and psi dimensions disagree");
  }
  Eigen::MatrixXd v = Z * psi * Z.transpose();
  v.diagonal().array() += sigma2;
  return v;
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

struct ClusterStats {
  explicit ClusterStats(const ClusterDesign& d) : ws(d) {
    Eigen::MatrixXd zty = d.Z.transpose() * d.y;
    proj_y = ws.ztz_inv() * zty;
    resid_y = d.y - d.Z * proj_y;
    resid_x = d.X - d.Z * ws.proj_x();
  }
  ClusterWorkspace ws;
  Eigen::VectorXd proj_y;   // (Z'Z)^{-1} Z'y
  Eigen::VectorXd resid_y;  // (I - P_Z) y
  Eigen::MatrixXd resid_x;  // (I - P_Z) X
};

struct Evaluation {
  double loglik = 0.0;
  Eigen::VectorXd beta;
  Eigen::VectorXd grad_beta;
  Eigen::MatrixXd grad_psi;  // symmetric matrix derivative d loglik / d psi
  double grad_sigma2 = 0.0;
};

class Likelihood {
 public:
  explicit Likelihood(const DesignSet& designs) : p_(designs.p()), q_(designs.q()) {
    stats_.reserve(designs.num_clusters());
    for (const auto& c : designs.clusters()) stats_.emplace_back(c);
  }

  Eigen::Index p() const { return p_; }
  Eigen::Index q() const { return q_; }

  // With beta == nullptr the GLS estimate is plugged in.
  Evaluation evaluate(const Eigen::MatrixXd& psi, double sigma2, const Eigen::VectorXd* beta,
                      bool gradient) {
    Evaluation ev;
    for (auto& s : stats_) s.ws.set_covariance(psi, sigma2);
    ev.beta = beta ? *beta : gls();

    ev.grad_beta = Eigen::VectorXd::Zero(p_);
    ev.grad_psi = Eigen::MatrixXd::Zero(q_, q_);
    for (const auto& s : stats_) {
      const auto& ws = s.ws;
      const double n = static_cast<double>(ws.n());
      Eigen::VectorXd u = s.proj_y - ws.proj_x() * ev.beta;
      Eigen::VectorXd e = s.resid_y - s.resid_x * ev.beta;
      double ee = e.squaredNorm();
      Eigen::VectorXd w = ws.m_factor().solve(u);
      double quad = ee / sigma2 + u.dot(w);
      ev.loglik -= 0.5 * (n * kLog2Pi + ws.logdet_v() + quad);
      if (!gradient) continue;
      ev.grad_beta += s.resid_x.transpose() * e / sigma2 + ws.proj_x().transpose() * w;
      ev.grad_psi -= 0.5 * (ws.m_inv() - w * w.transpose());
      const auto& g = ws.ztz_inv();
      double tr_mg = ws.m_inv().cwiseProduct(g).sum();
      ev.grad_sigma2 -= 0.5 * ((n - static_cast<double>(q_)) / sigma2 + tr_mg -
                               ee / (sigma2 * sigma2) - w.dot(g * w));
    }
    return ev;
  }

  Eigen::VectorXd gls() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p_, p_);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(p_);
    for (const auto& s : stats_) {
      const auto& ws = s.ws;
      a += ws.xt_vinv_x();
      b += s.resid_x.transpose() * s.resid_y / ws.sigma2() +
           ws.proj_x().transpose() * ws.m_factor().solve(s.proj_y);
    }
    Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive() &&
        ldlt.vectorD().minCoeff() > 1e-12 * a.diagonal().cwiseAbs().maxCoeff()) {
      return ldlt.solve(b);
    }
    return a.completeOrthogonalDecomposition().solve(b);
  }

 private:
  Eigen::Index p_, q_;
  std::vector<ClusterStats> stats_;
};

// Optimizer coordinates: phi = (vech L, log sigma2) with psi = L L'.
struct Coordinates {
  Eigen::Index q;

  Eigen::Index size() const { return num_vech(q) + 1; }

  Eigen::MatrixXd lower(const Eigen::VectorXd& phi) const {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
    Eigen::Index k = 0;
    for (Eigen::Index c = 0; c < q; ++c)
      for (Eigen::Index r = c; r < q; ++r) l(r, c) = phi(k++);
    return l;
  }

  Eigen::VectorXd pack(const Eigen::MatrixXd& l, double sigma2) const {
    Eigen::VectorXd phi(size());
    Eigen::Index k = 0;
    for (Eigen::Index c = 0; c < q; ++c)
      for (Eigen::Index r = c; r < q; ++r) phi(k++) = l(r, c);
    phi(k) = std::log(sigma2);
    return phi;
  }

  Eigen::Index diag_index(Eigen::Index c) const {
    // position of L(c, c) in vech order
    return c * q - c * (c - 1) / 2;
  }
};

struct Objective {
  Likelihood& lik;
  Coordinates coords;

  // Returns loglik; fills grad with d loglik / d phi.
  double operator()(const Eigen::VectorXd& phi, Eigen::VectorXd* grad) {
    Eigen::MatrixXd l = coords.lower(phi);
    double log_s2 = phi(phi.size() - 1);
    if (!std::isfinite(log_s2) || std::abs(log_s2) > 700.0) {
      return -std::numeric_limits<double>::infinity();
    }
    double s2 = std::exp(log_s2);
    Evaluation ev;
    try {
      ev = lik.evaluate(l * l.transpose(), s2, nullptr, grad != nullptr);
    } catch (const std::domain_error&) {
      return -std::numeric_limits<double>::infinity();
    }
    if (grad) {
      Eigen::MatrixXd dl = 2.0 * ev.grad_psi * l;
      *grad = coords.pack(dl, 1.0);
      (*grad)(grad->size() - 1) = s2 * ev.grad_sigma2;
    }
    return ev.loglik;
  }
};

double pooled_variance(const DesignSet& designs) {
  double sum = 0.0, sq = 0.0;
  for (const auto& c : designs.clusters()) {
    sum += c.y.sum();
    sq += c.y.squaredNorm();
  }
  double n = static_cast<double>(designs.num_obs());
  double mean = sum / n;
  return std::max(sq / n - mean * mean, 0.0);
}

Eigen::MatrixXd fd_hessian(Objective& f, const Eigen::VectorXd& phi,
                           const std::vector<Eigen::Index>& free) {
  const auto m = static_cast<Eigen::Index>(free.size());
  Eigen::MatrixXd h(m, m);
  Eigen::VectorXd gp, gm;
  for (Eigen::Index a = 0; a < m; ++a) {
    Eigen::Index i = free[static_cast<std::size_t>(a)];
    double step = 1e-5 * std::max(1.0, std::abs(phi(i)));
    Eigen::VectorXd xp = phi, xm = phi;
    xp(i) += step;
    xm(i) -= step;
    f(xp, &gp);
    f(xm, &gm);
    for (Eigen::Index b = 0; b < m; ++b) {
      h(b, a) = (gp(free[static_cast<std::size_t>(b)]) - gm(free[static_cast<std::size_t>(b)])) /
                (2.0 * step);
    }
  }
  return 0.5 * (h + h.transpose());
}

}  // namespace

double log_likelihood(const DesignSet& designs, const Theta& theta) {
  theta.validate(designs.p(), designs.q());
  Likelihood lik(designs);
  return lik.evaluate(theta.psi, theta.sigma2, &theta.beta, false).loglik;
}

Eigen::VectorXd score(const DesignSet& designs, const Theta& theta) {
  theta.validate(designs.p(), designs.q());
  Likelihood lik(designs);
  Evaluation ev = lik.evaluate(theta.psi, theta.sigma2, &theta.beta, true);
  const Eigen::Index p = designs.p(), q = designs.q();
  Eigen::VectorXd out(p + num_vech(q) + 1);
  out.head(p) = ev.grad_beta;
  out.segment(p, num_vech(q)) = duplication_matrix(q).transpose() * ev.grad_psi.reshaped();
  out(out.size() - 1) = ev.grad_sigma2;
  return out;
}

Eigen::VectorXd gls_beta(const DesignSet& designs, const Eigen::MatrixXd& psi, double sigma2) {
  Likelihood lik(designs);
  Evaluation ev = lik.evaluate(psi, sigma2, nullptr, false);
  return ev.beta;
}

double profiled_log_likelihood(const DesignSet& designs, const Eigen::MatrixXd& psi,
                               double sigma2) {
  Likelihood lik(designs);
  return lik.evaluate(psi, sigma2, nullptr, false).loglik;
}

Theta initial_theta(const DesignSet& designs) {
  const Eigen::Index p = designs.p(), q = designs.q();
  const double num_clusters = static_cast<double>(designs.num_clusters());

  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(p);
  for (const auto& c : designs.clusters()) {
    xtx += c.X.transpose() * c.X;
    xty += c.X.transpose() * c.y;
  }
  Theta theta;
  theta.beta = xtx.completeOrthogonalDecomposition().solve(xty);

  // Per-cluster least squares of the OLS residuals on Z_j.
  std::vector<Eigen::VectorXd> coef;
  coef.reserve(designs.num_clusters());
  Eigen::MatrixXd mean_g = Eigen::MatrixXd::Zero(q, q);
  Eigen::MatrixXd mean_szz_inv = Eigen::MatrixXd::Zero(q, q);
  double ss = 0.0;
  for (const auto& c : designs.clusters()) {
    Eigen::VectorXd r = c.y - c.X * theta.beta;
    Eigen::LLT<Eigen::MatrixXd> ztz(c.Z.transpose() * c.Z);
    Eigen::MatrixXd g = ztz.solve(Eigen::MatrixXd::Identity(q, q));
    Eigen::VectorXd b = g * (c.Z.transpose() * r);
    ss += (r - c.Z * b).squaredNorm();
    coef.push_back(std::move(b));
    mean_g += g / num_clusters;
    mean_szz_inv += g * static_cast<double>(c.y.size()) / num_clusters;
  }
  double df = static_cast<double>(designs.num_obs()) - num_clusters * static_cast<double>(q);
  double var_y = pooled_variance(designs);
  double fallback = var_y > 0.0 ? var_y : 1.0;
  theta.sigma2 = df > 0.0 ? ss / df : fallback;
  if (!(theta.sigma2 > 1e-8 * fallback)) theta.sigma2 = 0.5 * fallback;

  Eigen::VectorXd mean_b = Eigen::VectorXd::Zero(q);
  for (const auto& b : coef) mean_b += b / num_clusters;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(q, q);
  for (const auto& b : coef) cov += (b - mean_b) * (b - mean_b).transpose() / num_clusters;
  Eigen::MatrixXd psi = cov - theta.sigma2 * mean_g;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (psi + psi.transpose()));
  Eigen::VectorXd lambda = es.eigenvalues().cwiseMax(0.0);
  psi = es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose();
  psi.diagonal() += 0.01 * theta.sigma2 * mean_szz_inv.diagonal();
  theta.psi = 0.5 * (psi + psi.transpose());
  return theta;
}

FitResult fit_ml(const DesignSet& designs, const std::optional<Theta>& init,
                 const FitOptions& options) {
  const Eigen::Index p = designs.p(), q = designs.q();
  const double n_params = static_cast<double>(p + num_vech(q) + 1);
  if (static_cast<double>(designs.num_obs()) <= n_params) {
    throw std::invalid_argument("too few observations for the number of parameters");
  }
  Theta start = init ? *init : initial_theta(designs);
  start.validate(p, q);

  Likelihood lik(designs);
  Objective f{lik, Coordinates{q}};
  const Coordinates& coords = f.coords;

  // Start from a Cholesky factor of psi; a small ridge keeps singular starts usable.
  Eigen::MatrixXd psi0 = start.psi;
  Eigen::LLT<Eigen::MatrixXd> llt0(psi0);
  if (llt0.info() != Eigen::Success) {
    psi0.diagonal().array() += 1e-6 * std::max(psi0.trace(), start.sigma2);
    llt0.compute(psi0);
  }
  Eigen::VectorXd phi = coords.pack(llt0.matrixL(), start.sigma2);

  const Eigen::Index m = coords.size();
  Eigen::VectorXd grad(m), grad_new(m);
  double ll = f(phi, &grad);
  if (!std::isfinite(ll)) throw std::runtime_error("log-likelihood not finite at start");

  FitResult result;
  Eigen::MatrixXd h_inv = Eigen::MatrixXd::Identity(m, m);
  bool scaled = false;
  int stall = 0;
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    if (grad.norm() < options.grad_tol) break;
    // Ascent direction for loglik.
    Eigen::VectorXd dir = h_inv * grad;
    if (dir.dot(grad) <= 0.0) {
      h_inv.setIdentity();
      dir = grad;
    }
    double max_step = 5.0;
    if (dir.norm() > max_step) dir *= max_step / dir.norm();

    double step = 1.0;
    double ll_new = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd phi_new;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      phi_new = phi + step * dir;
      ll_new = f(phi_new, &grad_new);
      if (std::isfinite(ll_new) && ll_new >= ll + 1e-4 * step * dir.dot(grad)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;

    Eigen::VectorXd s = phi_new - phi;
    // Gradient of -loglik changes by y.
    Eigen::VectorXd y = grad - grad_new;
    double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        h_inv *= sy / y.squaredNorm();
        scaled = true;
      }
      double rho = 1.0 / sy;
      Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(m, m);
      h_inv = (eye - rho * s * y.transpose()) * h_inv * (eye - rho * y * s.transpose()) +
              rho * s * s.transpose();
    }
    double change = std::abs(ll_new - ll) / (1.0 + std::abs(ll));
    phi = phi_new;
    grad = grad_new;
    ll = ll_new;
    stall = change < options.rel_tol ? stall + 1 : 0;
    if (stall >= 5) break;
  }

  // Newton polish with a finite-difference Hessian of the analytic gradient.
  std::vector<Eigen::Index> all(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) all[static_cast<std::size_t>(i)] = i;
  for (int k = 0; k < 20 && grad.norm() >= options.grad_tol; ++k) {
    Eigen::MatrixXd neg_h = -fd_hessian(f, phi, all);
    Eigen::LLT<Eigen::MatrixXd> hl(neg_h);
    if (hl.info() != Eigen::Success) break;
    Eigen::VectorXd dir = hl.solve(grad);
    double step = 1.0;
    bool improved = false;
    for (int ls = 0; ls < 30; ++ls) {
      Eigen::VectorXd cand = phi + step * dir;
      double ll_c = f(cand, &grad_new);
      if (std::isfinite(ll_c) && (ll_c > ll || (ll_c >= ll - 1e-12 * (1.0 + std::abs(ll)) &&
                                                grad_new.norm() < grad.norm()))) {
        phi = cand;
        ll = ll_c;
        grad = grad_new;
        improved = true;
        break;
      }
      step *= 0.5;
    }
    if (!improved) break;
    ++it;
  }

  // Boundary: clamp tiny Cholesky pivots and flag the variances.
  const double var_y = std::max(pooled_variance(designs), 1e-300);
  result.boundary_flags.assign(static_cast<std::size_t>(q), false);
  bool any_boundary = false;
  for (Eigen::Index c = 0; c < q; ++c) {
    Eigen::Index idx = coords.diag_index(c);
    if (phi(idx) * phi(idx) < options.boundary_tol * var_y) {
      phi(idx) = 0.0;
      result.boundary_flags[static_cast<std::size_t>(c)] = true;
      any_boundary = true;
    }
  }
  if (any_boundary) ll = f(phi, &grad);

  // Column signs of L are not identified; report a factor with diag >= 0.
  Eigen::MatrixXd l = coords.lower(phi);
  for (Eigen::Index c = 0; c < q; ++c)
    if (l(c, c) < 0.0) l.col(c) *= -1.0;
  const double s2 = std::exp(phi(m - 1));
  phi = coords.pack(l, s2);

  result.theta_hat.psi = l * l.transpose();
  result.theta_hat.sigma2 = s2;
  result.theta_hat.beta = lik.evaluate(result.theta_hat.psi, s2, nullptr, false).beta;
  result.loglik = ll;
  result.deviance = -2.0 * ll;
  result.gradient_norm = grad.norm();
  result.iterations = it;
  result.converged = result.gradient_norm < options.grad_tol || any_boundary;
  result.message = result.converged ? "converged" : "gradient tolerance not reached";

  // Second-order check over the coordinates not pinned at the boundary.
  std::vector<Eigen::Index> free;
  for (Eigen::Index i = 0; i < m; ++i) {
    bool pinned = false;
    for (Eigen::Index c = 0; c < q; ++c)
      if (result.boundary_flags[static_cast<std::size_t>(c)] && coords.diag_index(c) == i)
        pinned = true;
    if (!pinned) free.push_back(i);
  }
  if (result.converged && !free.empty()) {
    Eigen::MatrixXd neg_h = -fd_hessian(f, phi, free);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(neg_h, Eigen::EigenvaluesOnly);
    double top = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (es.eigenvalues()(0) < -1e-5 * top) {
      result.converged = false;
      result.message = "Hessian is indefinite at the final estimate";
    }
  }
  return result;
}

double icc(const Theta& theta) {
  if (theta.psi.rows() != 1 || theta.psi.cols() != 1) {
    throw std::invalid_argument("icc requires a random-intercept-only model");
  }
  double tau = theta.psi(0, 0);
  if (tau < 0.0 || !(theta.sigma2 >= 0.0)) throw std::invalid_argument("invalid variances");
  double total = tau + theta.sigma2;
  return total > 0.0 ? tau / total : 0.0;
}

}  // namespace mlmbic
