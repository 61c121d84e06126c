#include "mlmbic/fisher.hpp"

#include <cmath>
#include <string>

#include "mlmbic/lmmfit.hpp"

namespace mlmbic {

namespace {

double logdet_from_llt(const Eigen::LLT<Eigen::MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

}  // namespace

ClusterWorkspace::ClusterWorkspace(const ClusterDesign& design) : n_(design.y.size()) {
  const auto& X = design.X;
  const auto& Z = design.Z;
  xtx_ = X.transpose() * X;
  ztx_ = Z.transpose() * X;
  ztz_ = Z.transpose() * Z;
  Eigen::LLT<Eigen::MatrixXd> llt(ztz_);
  if (llt.info() != Eigen::Success) {
    throw DataError("random-effect design does not have full column rank");
  }
  ztz_inv_ = llt.solve(Eigen::MatrixXd::Identity(ztz_.rows(), ztz_.cols()));
  logdet_ztz_ = logdet_from_llt(llt);
  proj_x_ = llt.solve(ztx_);
  // Residualize explicitly instead of subtracting cross-products.
  Eigen::MatrixXd resid = X - Z * proj_x_;
  within_xx_ = resid.transpose() * resid;
}

void ClusterWorkspace::set_covariance(const Eigen::MatrixXd& psi, double sigma2) {
  sigma2_ = sigma2;
  Eigen::MatrixXd m = sigma2 * ztz_inv_ + psi;
  m_llt_.compute(m);
  if (m_llt_.info() != Eigen::Success) {
    throw std::domain_error("sigma2 (Z'Z)^{-1} + Psi is not positive definite");
  }
  m_inv_ = m_llt_.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  logdet_m_ = logdet_from_llt(m_llt_);
}

double ClusterWorkspace::logdet_v() const {
  return static_cast<double>(n_ - q()) * std::log(sigma2_) + logdet_m_ + logdet_ztz_;
}

Eigen::MatrixXd ClusterWorkspace::xt_vinv_x() const {
  return within_xx_ / sigma2_ + proj_x_.transpose() * m_inv_ * proj_x_;
}

Eigen::MatrixXd woodbury_apply(const Eigen::MatrixXd& Z, const Eigen::MatrixXd& psi,
                               double sigma2, const Eigen::MatrixXd& B) {
  Eigen::LLT<Eigen::MatrixXd> ztz(Z.transpose() * Z);
  Eigen::MatrixXd coef = ztz.solve(Z.transpose() * B);  // (Z'Z)^{-1} Z'B
  Eigen::MatrixXd m = sigma2 * ztz.solve(Eigen::MatrixXd::Identity(Z.cols(), Z.cols())) + psi;
  Eigen::LLT<Eigen::MatrixXd> m_llt(m);
  return (B - Z * coef) / sigma2 + Z * ztz.solve(m_llt.solve(coef));
}

Eigen::MatrixXd duplication_matrix(Eigen::Index q) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(q * q, num_vech(q));
  Eigen::Index k = 0;
  for (Eigen::Index col = 0; col < q; ++col) {
    for (Eigen::Index row = col; row < q; ++row, ++k) {
      d(row + col * q, k) = 1.0;
      d(col + row * q, k) = 1.0;
    }
  }
  return d;
}

Eigen::VectorXd vech(const Eigen::MatrixXd& a) {
  const Eigen::Index q = a.rows();
  Eigen::VectorXd v(num_vech(q));
  Eigen::Index k = 0;
  for (Eigen::Index col = 0; col < q; ++col)
    for (Eigen::Index row = col; row < q; ++row) v(k++) = a(row, col);
  return v;
}

Eigen::MatrixXd unvech(const Eigen::VectorXd& v, Eigen::Index q) {
  Eigen::MatrixXd a(q, q);
  Eigen::Index k = 0;
  for (Eigen::Index col = 0; col < q; ++col)
    for (Eigen::Index row = col; row < q; ++row, ++k) a(row, col) = a(col, row) = v(k);
  return a;
}

SingularBlockError::SingularBlockError(const char* block, double smallest_eigenvalue)
    : std::runtime_error(std::string("information block ") + block +
                         " is singular (smallest eigenvalue " +
                         std::to_string(smallest_eigenvalue) + ")"),
      smallest_(smallest_eigenvalue) {}

Eigen::MatrixXd cluster_info_fixed(const ClusterWorkspace& ws) { return ws.xt_vinv_x(); }

Eigen::MatrixXd cluster_info_random(const ClusterWorkspace& ws) {
  const Eigen::Index q = ws.q();
  const Eigen::Index qs = num_vech(q);
  const Eigen::MatrixXd& m_inv = ws.m_inv();
  const Eigen::MatrixXd& g = ws.ztz_inv();
  const double s2 = ws.sigma2();

  Eigen::MatrixXd info(qs + 1, qs + 1);

  // 1/2 D'(M^{-1} (x) M^{-1})D, entry by entry: for vech positions (a,b) and
  // (c,d) the Kronecker product contracts to the symmetrized sum below.
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pos;
  pos.reserve(static_cast<std::size_t>(qs));
  for (Eigen::Index col = 0; col < q; ++col)
    for (Eigen::Index row = col; row < q; ++row) pos.emplace_back(row, col);
  auto w = [](Eigen::Index a, Eigen::Index b) { return a == b ? 1.0 : 2.0; };
  for (Eigen::Index k = 0; k < qs; ++k) {
    auto [a, b] = pos[static_cast<std::size_t>(k)];
    for (Eigen::Index l = 0; l <= k; ++l) {
      auto [c, d] = pos[static_cast<std::size_t>(l)];
      // vec(E_ab + E_ba)' (M^-1 (x) M^-1) vec(E_cd + E_dc) scaled back by the
      // multiplicity of off-diagonal entries.
      double v = m_inv(a, c) * m_inv(b, d) + m_inv(a, d) * m_inv(b, c);
      v *= w(a, b) * w(c, d) / 4.0;
      info(k, l) = info(l, k) = v;
    }
  }

  // Z'V^{-2}Z = M^{-1} (Z'Z)^{-1} M^{-1}
  Eigen::MatrixXd zv2z = m_inv * g * m_inv;
  for (Eigen::Index k = 0; k < qs; ++k) {
    auto [a, b] = pos[static_cast<std::size_t>(k)];
    double v = 0.5 * (a == b ? zv2z(a, a) : zv2z(a, b) + zv2z(b, a));
    info(k, qs) = info(qs, k) = v;
  }

  // tr(V^{-2}) = (n - q)/sigma2^2 + tr((M^{-1}(Z'Z)^{-1})^2)
  Eigen::MatrixXd mg = m_inv * g;
  info(qs, qs) = 0.5 * (static_cast<double>(ws.n() - q) / (s2 * s2) + (mg * mg).trace());
  return info;
}

namespace {

template <typename Fn>
Eigen::MatrixXd accumulate(const DesignSet& designs, const Theta& theta, Eigen::Index dim,
                           Fn&& fn) {
  Eigen::MatrixXd total = Eigen::MatrixXd::Zero(dim, dim);
  for (const auto& cluster : designs.clusters()) {
    ClusterWorkspace ws(cluster);
    ws.set_covariance(theta.psi, theta.sigma2);
    total += fn(ws);
  }
  return total;
}

double checked_logdet(const Eigen::MatrixXd& block, const char* name) {
  Eigen::LLT<Eigen::MatrixXd> llt(block);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    // LLT succeeds on some numerically semidefinite inputs; require a
    // strictly positive pivot relative to the scale of the block.
    auto diag = llt.matrixLLT().diagonal();
    double scale = block.diagonal().cwiseAbs().maxCoeff();
    ok = diag.minCoeff() > 0.0 && diag.cwiseAbs2().minCoeff() > 1e-14 * scale;
  }
  if (!ok) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(block, Eigen::EigenvaluesOnly);
    throw SingularBlockError(name, es.eigenvalues()(0));
  }
  return logdet_from_llt(llt);
}

}  // namespace

Eigen::MatrixXd info_fixed(const DesignSet& designs, const Theta& theta) {
  theta.validate(designs.p(), designs.q());
  return accumulate(designs, theta, designs.p(),
                    [](const ClusterWorkspace& ws) { return cluster_info_fixed(ws); });
}

Eigen::MatrixXd info_random(const DesignSet& designs, const Theta& theta) {
  theta.validate(designs.p(), designs.q());
  return accumulate(designs, theta, num_vech(designs.q()) + 1,
                    [](const ClusterWorkspace& ws) { return cluster_info_random(ws); });
}

InfoBlocks logdet_blocks(const DesignSet& designs, const Theta& theta) {
  theta.validate(designs.p(), designs.q());
  InfoBlocks out;
  out.I_bb = Eigen::MatrixXd::Zero(designs.p(), designs.p());
  out.I_rr = Eigen::MatrixXd::Zero(num_vech(designs.q()) + 1, num_vech(designs.q()) + 1);
  for (const auto& cluster : designs.clusters()) {
    ClusterWorkspace ws(cluster);
    ws.set_covariance(theta.psi, theta.sigma2);
    out.I_bb += cluster_info_fixed(ws);
    out.I_rr += cluster_info_random(ws);
  }
  out.logdet_bb = checked_logdet(out.I_bb, "I_bb");
  out.logdet_rr = checked_logdet(out.I_rr, "I_rr");
  return out;
}

}  // namespace mlmbic
