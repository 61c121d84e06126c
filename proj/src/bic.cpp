#include "mlmbic/bic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mlmbic/parallel.hpp"

namespace mlmbic {

PsiRank rank_psi(const Eigen::MatrixXd& psi_hat, double tol) {
  PsiRank out;
  const Eigen::Index q = psi_hat.rows();
  if (q == 0) {
    out.U1.resize(0, 0);
    out.eigenvalues.resize(0);
    return out;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (psi_hat + psi_hat.transpose()));
  out.eigenvalues = es.eigenvalues();
  double cut = tol * std::max(out.eigenvalues(q - 1), 1e-300);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < q; ++i)
    if (out.eigenvalues(i) > cut) keep.push_back(i);
  out.q1 = static_cast<int>(keep.size());
  out.U1.resize(q, out.q1);
  for (int k = 0; k < out.q1; ++k) out.U1.col(k) = es.eigenvectors().col(keep[k]);
  return out;
}

int intersection_dim(const DesignSet& designs, const Eigen::MatrixXd* z_basis, double tol) {
  const Eigen::Index p = designs.p();
  if (p == 0) return 0;

  // Unit-RMS columns make the rank threshold independent of covariate units.
  Eigen::VectorXd ss = Eigen::VectorXd::Zero(p);
  for (const auto& c : designs.clusters()) ss += c.X.colwise().squaredNorm().transpose();
  Eigen::VectorXd scale(p);
  for (Eigen::Index k = 0; k < p; ++k) {
    double rms = std::sqrt(ss(k) / static_cast<double>(designs.num_obs()));
    scale(k) = rms > 0.0 ? 1.0 / rms : 1.0;
  }

  Eigen::MatrixXd s_ee = Eigen::MatrixXd::Zero(p, p);
  for (const auto& c : designs.clusters()) {
    Eigen::MatrixXd x = c.X * scale.asDiagonal();
    Eigen::MatrixXd z = z_basis ? Eigen::MatrixXd(c.Z * *z_basis) : c.Z;
    Eigen::MatrixXd e = x;
    if (z.cols() > 0) {
      Eigen::LLT<Eigen::MatrixXd> ztz(z.transpose() * z);
      e -= z * ztz.solve(z.transpose() * x);
    }
    s_ee += e.transpose() * e;
  }
  s_ee /= static_cast<double>(designs.num_obs());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s_ee, Eigen::EigenvaluesOnly);
  double cut = tol * std::max(es.eigenvalues()(p - 1), 1.0);
  int rank = 0;
  for (Eigen::Index i = 0; i < p; ++i)
    if (es.eigenvalues()(i) > cut) ++rank;
  return static_cast<int>(p) - rank;
}

PenaltyCount count_penalty(const DesignSet& designs, const Eigen::MatrixXd& psi_hat, double tol) {
  if (psi_hat.rows() != designs.q() || psi_hat.cols() != designs.q()) {
    throw std::invalid_argument("psi_hat does not match the random-effect design");
  }
  PenaltyCount c;
  c.p = static_cast<int>(designs.p());
  c.q = static_cast<int>(designs.q());
  c.q_star = c.q * (c.q + 1) / 2;
  c.K = c.p + c.q_star + 1;

  PsiRank r = rank_psi(psi_hat, tol);
  c.q1 = r.q1;
  c.q2 = c.q - c.q1;
  c.q2_star = c.q2 * (c.q2 + 1) / 2;
  c.singular = c.q1 < c.q;
  if (!c.singular) {
    c.p2 = intersection_dim(designs, nullptr, tol);
    c.p1 = c.p - c.p2;
    c.K1 = c.p1 + 1;
  } else {
    c.p2 = c.q1 > 0 ? intersection_dim(designs, &r.U1, tol) : 0;
    c.p1 = c.p - c.p2;
    c.K1 = c.p1 + 1 + c.q1 * c.q2 + 2 * c.q2_star;
  }
  c.K2 = c.K - c.K1;
  return c;
}

BicValues bic_all(double deviance, int K1, int K2, double N, double J) {
  if (!(J >= 1.0) || !(N >= J)) throw std::invalid_argument("bic_all requires N >= J >= 1");
  const double log_n = std::log(N), log_j = std::log(J);
  const double k = static_cast<double>(K1 + K2);
  BicValues v;
  v.bic_e = deviance + K1 * log_n + K2 * log_j;
  v.bic_n = deviance + k * log_n;
  v.bic_j = deviance + k * log_j;
  return v;
}

BicValues bic_all(double deviance, const PenaltyCount& counts, double N, double J) {
  return bic_all(deviance, counts.K1, counts.K2, N, J);
}

namespace {

std::string default_label(const TermSet& set, char prefix, std::size_t index) {
  return set.label.empty() ? prefix + std::to_string(index + 1) : set.label;
}

void fit_candidate(const Dataset& data, CandidateResult& cand, const SelectOptions& options) {
  try {
    DesignSet designs = build_designs(data, cand.spec);
    cand.fit = fit_ml(designs, std::nullopt, options.fit);
    if (!cand.fit.converged) cand.warnings.push_back("fit did not converge: " + cand.fit.message);
    for (std::size_t k = 0; k < cand.fit.boundary_flags.size(); ++k) {
      if (cand.fit.boundary_flags[k]) {
        cand.warnings.push_back("variance of random term " + cand.spec.random_terms[k].to_string() +
                                " estimated at the boundary");
      }
    }
    cand.counts = count_penalty(designs, cand.fit.theta_hat.psi, options.rank_tol);
    if (cand.counts.singular) {
      cand.warnings.push_back("psi is singular (rank " + std::to_string(cand.counts.q1) + " of " +
                              std::to_string(cand.counts.q) + "); redundant-effect K1 used");
      if (cand.counts.K2 < 0) cand.warnings.push_back("K2 is negative");
    } else if (cand.counts.q > 1) {
      PsiRank r = rank_psi(cand.fit.theta_hat.psi, options.rank_tol);
      double ratio = r.eigenvalues(0) / r.eigenvalues(r.eigenvalues.size() - 1);
      if (ratio < kNearSingularRatio) {
        std::ostringstream msg;
        msg << "psi is close to singular (eigenvalue ratio " << ratio << ")";
        cand.warnings.push_back(msg.str());
      }
    }
    cand.bic = bic_all(cand.fit.deviance, cand.counts, static_cast<double>(designs.num_obs()),
                       static_cast<double>(designs.num_clusters()));
    cand.ok = true;
  } catch (const std::exception& e) {
    cand.ok = false;
    cand.error = e.what();
  }
}

template <typename Key>
void assign_ranks(std::vector<CandidateResult>& cands, Key key, int CandidateResult::*rank) {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (cands[i].ok) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double ka = key(cands[a]), kb = key(cands[b]);
    if (ka != kb) return ka < kb;
    if (cands[a].counts.K != cands[b].counts.K) return cands[a].counts.K < cands[b].counts.K;
    return a < b;
  });
  for (std::size_t r = 0; r < order.size(); ++r) cands[order[r]].*rank = static_cast<int>(r + 1);
}

}  // namespace

BicReport enumerate_and_rank(const Dataset& data, const std::string& response,
                             const std::string& group, const std::vector<TermSet>& fixed_sets,
                             const std::vector<TermSet>& random_sets,
                             const SelectOptions& options) {
  if (fixed_sets.empty() || random_sets.empty()) {
    throw std::invalid_argument("candidate sets must be nonempty");
  }
  BicReport report;
  report.N = data.num_rows();
  report.J = data.num_clusters();
  for (std::size_t f = 0; f < fixed_sets.size(); ++f) {
    for (std::size_t r = 0; r < random_sets.size(); ++r) {
      CandidateResult cand;
      cand.fixed_label = default_label(fixed_sets[f], 'F', f);
      cand.random_label = default_label(random_sets[r], 'V', r);
      cand.label = cand.fixed_label + "+" + cand.random_label;
      cand.spec = ModelSpec{response, fixed_sets[f].terms, random_sets[r].terms, group};
      report.candidates.push_back(std::move(cand));
    }
  }
  parallel_for(report.candidates.size(), options.threads,
               [&](std::size_t i) { fit_candidate(data, report.candidates[i], options); });

  auto& c = report.candidates;
  assign_ranks(c, [](const CandidateResult& x) { return x.bic.bic_e; }, &CandidateResult::rank_e);
  assign_ranks(c, [](const CandidateResult& x) { return x.bic.bic_n; }, &CandidateResult::rank_n);
  assign_ranks(c, [](const CandidateResult& x) { return x.bic.bic_j; }, &CandidateResult::rank_j);
  return report;
}

}  // namespace mlmbic
