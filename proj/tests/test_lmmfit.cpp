#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "mlmbic/fisher.hpp"
#include "mlmbic/lmmfit.hpp"

using namespace mlmbic;

namespace {

std::mt19937_64& rng() {
  static std::mt19937_64 gen(2024);
  return gen;
}
double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng()); }
double uniform(double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng()); }

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal();
  return m;
}

// Data simulated from the model with intercept + one covariate in both X and Z.
DesignSet simulate(int J, int n_lo, int n_hi, Eigen::Index q, const Theta& t) {
  std::vector<ClusterDesign> cs;
  Eigen::LLT<Eigen::MatrixXd> chol(t.psi);
  for (int j = 0; j < J; ++j) {
    int n = std::uniform_int_distribution<int>(n_lo, n_hi)(rng());
    ClusterDesign c;
    c.X = random_matrix(n, t.beta.size());
    c.X.col(0).setOnes();
    if (t.beta.size() > 2) c.X.col(2).setConstant(normal());  // between-cluster covariate
    c.Z = c.X.leftCols(q);
    Eigen::VectorXd b = chol.matrixL() * random_matrix(q, 1);
    c.y = c.X * t.beta + c.Z * b + std::sqrt(t.sigma2) * random_matrix(n, 1);
    cs.push_back(std::move(c));
  }
  return DesignSet(std::move(cs));
}

Theta make_theta(Eigen::VectorXd beta, Eigen::MatrixXd psi, double s2) {
  Theta t;
  t.beta = std::move(beta);
  t.psi = std::move(psi);
  t.sigma2 = s2;
  return t;
}

Theta random_theta(Eigen::Index p, Eigen::Index q) {
  Eigen::MatrixXd a = random_matrix(q, q);
  return make_theta(random_matrix(p, 1), a * a.transpose() + 0.2 * Eigen::MatrixXd::Identity(q, q),
                    uniform(0.3, 2.0));
}

// Dense multivariate-normal log-density summed over clusters.
double dense_loglik(const DesignSet& ds, const Theta& t) {
  double ll = 0.0;
  for (const auto& c : ds.clusters()) {
    Eigen::MatrixXd v = c.Z * t.psi * c.Z.transpose();
    v.diagonal().array() += t.sigma2;
    Eigen::LLT<Eigen::MatrixXd> llt(v);
    Eigen::VectorXd r = c.y - c.X * t.beta;
    double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    ll -= 0.5 * (static_cast<double>(c.y.size()) * std::log(2 * std::numbers::pi) + logdet +
                 r.dot(llt.solve(r)));
  }
  return ll;
}

// Dense profiled log-likelihood with its own GLS step.
double dense_profiled(const DesignSet& ds, const Eigen::MatrixXd& psi, double s2) {
  const Eigen::Index p = ds.p();
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  for (const auto& c : ds.clusters()) {
    Eigen::MatrixXd v = c.Z * psi * c.Z.transpose();
    v.diagonal().array() += s2;
    Eigen::MatrixXd vi = v.inverse();
    a += c.X.transpose() * vi * c.X;
    b += c.X.transpose() * vi * c.y;
  }
  return dense_loglik(ds, make_theta(a.ldlt().solve(b), psi, s2));
}

Eigen::VectorXd pack(const Theta& t) {
  Eigen::VectorXd v(t.beta.size() + num_vech(t.psi.rows()) + 1);
  v << t.beta, vech(t.psi), t.sigma2;
  return v;
}

Theta unpack(const Eigen::VectorXd& v, Eigen::Index p, Eigen::Index q) {
  return make_theta(v.head(p), unvech(v.segment(p, num_vech(q)), q), v(v.size() - 1));
}

Eigen::VectorXd fd_gradient(const DesignSet& ds, const Theta& t, double h = 1e-5) {
  Eigen::VectorXd base = pack(t);
  Eigen::VectorXd g(base.size());
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    Eigen::VectorXd up = base, dn = base;
    double step = h * std::max(1.0, std::abs(base(i)));
    up(i) += step;
    dn(i) -= step;
    g(i) = (log_likelihood(ds, unpack(up, ds.p(), ds.q())) -
            log_likelihood(ds, unpack(dn, ds.p(), ds.q()))) /
           (2 * step);
  }
  return g;
}

}  // namespace

TEST_CASE("marginal_cov examples") {
  Eigen::MatrixXd z = Eigen::MatrixXd::Ones(2, 1);
  Eigen::Matrix2d expected;
  expected << 2, 1, 1, 2;
  CHECK(marginal_cov(z, Eigen::MatrixXd::Ones(1, 1), 1.0) == expected);

  Eigen::MatrixXd z3 = random_matrix(4, 2);
  CHECK(marginal_cov(z3, Eigen::MatrixXd::Zero(2, 2), 2.5) ==
        2.5 * Eigen::MatrixXd::Identity(4, 4));

  Eigen::MatrixXd psi(2, 2);
  psi << 2, 0.5, 0.5, 1;
  Eigen::MatrixXd want = psi;
  want.diagonal().array() += 0.3;
  CHECK((marginal_cov(Eigen::MatrixXd::Identity(2, 2), psi, 0.3) - want).norm() < 1e-15);
}

TEST_CASE("log-likelihood of the two-point cluster") {
  ClusterDesign c;
  c.X = Eigen::MatrixXd::Ones(2, 1);
  c.Z = Eigen::MatrixXd::Ones(2, 1);
  c.y = Eigen::Vector2d(1, 2);
  DesignSet ds({c});
  Theta t = make_theta(Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Ones(1, 1), 1.0);
  double oracle = dense_loglik(ds, t);
  CHECK(oracle == doctest::Approx(-2.7205).epsilon(1e-4));
  CHECK(std::abs(log_likelihood(ds, t) - oracle) < 1e-12);
}

TEST_CASE("zero psi gives independent normal log-densities") {
  Theta gen = make_theta(Eigen::Vector2d(1, -1), Eigen::MatrixXd::Identity(1, 1), 1.0);
  DesignSet ds = simulate(4, 2, 5, 1, gen);
  Theta t = make_theta(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Zero(1, 1), 1.7);
  double ss = 0.0;
  for (const auto& c : ds.clusters()) ss += c.y.squaredNorm();
  double n = static_cast<double>(ds.num_obs());
  double expected = -0.5 * n * std::log(2 * std::numbers::pi * 1.7) - ss / (2 * 1.7);
  CHECK(log_likelihood(ds, t) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("Woodbury log-likelihood equals the dense computation") {
  for (int trial = 0; trial < 40; ++trial) {
    Eigen::Index q = 1 + trial % 2;
    Theta t = random_theta(3, q);
    DesignSet ds = simulate(3, static_cast<int>(q) + 1, 6, q, t);
    Theta at = random_theta(3, q);
    CHECK(std::abs(log_likelihood(ds, at) - dense_loglik(ds, at)) < 1e-8);
  }
  // Singular psi.
  Theta t = random_theta(2, 2);
  DesignSet ds = simulate(4, 3, 6, 2, t);
  Theta sing = make_theta(Eigen::Vector2d(0.3, 0.1), Eigen::MatrixXd::Ones(2, 2), 0.8);
  CHECK(std::abs(log_likelihood(ds, sing) - dense_loglik(ds, sing)) < 1e-8);
}

TEST_CASE("analytic score matches central differences") {
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::Index q = 1 + trial % 2;
    Theta gen = random_theta(3, q);
    DesignSet ds = simulate(5, 3, 6, q, gen);
    Theta at = random_theta(3, q);
    Eigen::VectorXd analytic = score(ds, at);
    Eigen::VectorXd numeric = fd_gradient(ds, at);
    double rel = (analytic - numeric).norm() / std::max(1.0, numeric.norm());
    CHECK(rel < 1e-5);
  }
}

TEST_CASE("profiled log-likelihood uses the GLS beta") {
  Theta gen = random_theta(3, 2);
  DesignSet ds = simulate(6, 3, 6, 2, gen);
  Theta at = random_theta(3, 2);
  CHECK(std::abs(profiled_log_likelihood(ds, at.psi, at.sigma2) -
                 dense_profiled(ds, at.psi, at.sigma2)) < 1e-8);
  Eigen::VectorXd beta = gls_beta(ds, at.psi, at.sigma2);
  Eigen::VectorXd s = score(ds, make_theta(beta, at.psi, at.sigma2));
  CHECK(s.head(3).norm() < 1e-8);
}

TEST_CASE("fit matches a grid-search oracle on a tiny dataset") {
  // J = 3 clusters of size 2, random intercept.
  std::vector<ClusterDesign> cs;
  const double ys[3][2] = {{1.0, 1.6}, {3.1, 2.2}, {-0.4, 0.5}};
  for (const auto& y : ys) {
    ClusterDesign c;
    c.X = Eigen::MatrixXd::Ones(2, 1);
    c.Z = Eigen::MatrixXd::Ones(2, 1);
    c.y = Eigen::Vector2d(y[0], y[1]);
    cs.push_back(c);
  }
  DesignSet ds(cs);
  FitResult fit = fit_ml(ds);
  CHECK(fit.converged);

  // Zooming grid over (log sigma2, tau0^2 >= 0).
  double best = -1e300, bs = 0.0, bt = 0.0;
  double s_lo = -6.0, s_hi = 3.0, t_lo = 0.0, t_hi = 10.0;
  for (int level = 0; level < 8; ++level) {
    const int m = 60;
    for (int i = 0; i <= m; ++i) {
      for (int k = 0; k <= m; ++k) {
        double ls = s_lo + (s_hi - s_lo) * i / m;
        double tau = t_lo + (t_hi - t_lo) * k / m;
        double ll = dense_profiled(ds, Eigen::MatrixXd::Constant(1, 1, tau), std::exp(ls));
        if (ll > best) {
          best = ll;
          bs = ls;
          bt = tau;
        }
      }
    }
    double ws = (s_hi - s_lo) / 10, wt = (t_hi - t_lo) / 10;
    s_lo = bs - ws;
    s_hi = bs + ws;
    t_lo = std::max(0.0, bt - wt);
    t_hi = bt + wt;
  }
  CHECK(std::abs(fit.deviance - (-2.0 * best)) < 1e-4);
  CHECK(fit.theta_hat.sigma2 == doctest::Approx(std::exp(bs)).epsilon(1e-2));
}

TEST_CASE("fit recovers parameters, is deterministic and reports exact deviance") {
  Theta gen = make_theta(Eigen::Vector3d(2.0, 0.5, -1.0), Eigen::Matrix2d{{1.0, 0.3}, {0.3, 0.5}},
                         0.8);
  DesignSet ds = simulate(60, 5, 12, 2, gen);
  FitResult a = fit_ml(ds);
  FitResult b = fit_ml(ds);
  CHECK(a.converged);
  CHECK(a.gradient_norm < 1e-6);
  CHECK(a.deviance == -2.0 * a.loglik);
  CHECK(a.deviance == b.deviance);
  CHECK(a.theta_hat.psi == b.theta_hat.psi);
  CHECK(a.iterations <= 500);
  CHECK((a.theta_hat.beta - gen.beta).cwiseAbs().maxCoeff() < 0.5);

  // Stationarity by finite differences at the interior optimum.
  Eigen::VectorXd g = fd_gradient(ds, a.theta_hat, 1e-6);
  CHECK(g.norm() < 1e-5 * (1.0 + std::abs(a.loglik)));

  // Analytic score vanishes as well.
  CHECK(score(ds, a.theta_hat).norm() < 1e-5 * (1.0 + std::abs(a.loglik)));
  // No better point nearby.
  CHECK(log_likelihood(ds, a.theta_hat) == doctest::Approx(a.loglik).epsilon(1e-12));
}

TEST_CASE("fit is invariant to cluster order") {
  Theta gen = make_theta(Eigen::Vector2d(1.0, 0.4), Eigen::Matrix2d{{0.9, -0.2}, {-0.2, 0.4}}, 1.1);
  DesignSet ds = simulate(40, 4, 9, 2, gen);
  FitResult base = fit_ml(ds);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<ClusterDesign> cs = ds.clusters();
    std::shuffle(cs.begin(), cs.end(), rng());
    FitResult perm = fit_ml(DesignSet(std::move(cs)));
    CHECK(std::abs(perm.deviance - base.deviance) < 1e-8);
  }
}

TEST_CASE("zero between-cluster variance lands on the boundary") {
  // Cluster means of the response are exactly equal: the ML estimate of tau0^2 is 0.
  std::vector<ClusterDesign> cs;
  for (int j = 0; j < 8; ++j) {
    ClusterDesign c;
    c.X = Eigen::MatrixXd::Ones(4, 1);
    c.Z = c.X;
    Eigen::Vector4d y(normal(), normal(), normal(), normal());
    y.array() -= y.mean();
    c.y = y;
    cs.push_back(c);
  }
  FitResult fit = fit_ml(DesignSet(cs));
  CHECK(fit.converged);
  REQUIRE(fit.boundary_flags.size() == 1);
  CHECK(fit.boundary_flags[0]);
  CHECK(fit.theta_hat.psi(0, 0) == 0.0);
}

TEST_CASE("fit honours an explicit start") {
  Theta gen = make_theta(Eigen::Vector2d(0.0, 1.0), Eigen::MatrixXd::Constant(1, 1, 2.0), 1.0);
  DesignSet ds = simulate(30, 4, 8, 1, gen);
  FitResult from_default = fit_ml(ds);
  FitResult from_truth = fit_ml(ds, gen);
  CHECK(from_truth.converged);
  CHECK(std::abs(from_truth.deviance - from_default.deviance) < 1e-6);
}

TEST_CASE("fit rejects too few observations") {
  ClusterDesign c;
  c.X = Eigen::MatrixXd::Ones(1, 1);
  c.Z = c.X;
  c.y = Eigen::VectorXd::Ones(1);
  CHECK_THROWS_AS(fit_ml(DesignSet({c, c, c})), std::invalid_argument);
}

TEST_CASE("icc") {
  Theta t = make_theta(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Constant(1, 1, 0.702), 1.222);
  CHECK(icc(t) == doctest::Approx(0.365).epsilon(0.005));
  t.psi(0, 0) = 0.0;
  CHECK(icc(t) == 0.0);
  t.psi(0, 0) = 2.0;
  t.sigma2 = 1e-14;
  CHECK(icc(t) == doctest::Approx(1.0));
  t.psi = Eigen::MatrixXd::Identity(2, 2);
  CHECK_THROWS_AS(icc(t), std::invalid_argument);
}

TEST_CASE("theta validation") {
  Theta t = make_theta(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), 1.0);
  CHECK_NOTHROW(t.validate(2, 2));
  CHECK_THROWS_AS(t.validate(3, 2), std::invalid_argument);
  CHECK_THROWS_AS(t.validate(2, 1), std::invalid_argument);
  Theta bad = t;
  bad.sigma2 = 0.0;
  CHECK_THROWS_AS(bad.validate(2, 2), std::invalid_argument);
  bad = t;
  bad.psi(0, 1) = 0.5;
  CHECK_THROWS_AS(bad.validate(2, 2), std::invalid_argument);
  bad = t;
  bad.psi << 1, 2, 2, 1;
  CHECK_THROWS_AS(bad.validate(2, 2), std::invalid_argument);
}
