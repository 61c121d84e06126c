#include "mlmbic/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "mlmbic/fisher.hpp"
#include "mlmbic/format.hpp"
#include "mlmbic/parallel.hpp"

namespace mlmbic {

ModelKind parse_model_kind(std::string_view name) {
  if (name == "A" || name == "a") return ModelKind::A;
  if (name == "B" || name == "b") return ModelKind::B;
  throw std::invalid_argument("unknown model '" + std::string(name) + "' (expected A or B)");
}

const char* to_string(ModelKind kind) { return kind == ModelKind::A ? "A" : "B"; }

const char* to_string(Block block) { return block == Block::Fixed ? "fixed" : "random"; }

void DemoConfig::validate() const {
  if (n_grid.empty() || J_grid.empty() || sigma2_levels.empty()) {
    throw std::invalid_argument("demo grids must be nonempty");
  }
  if (model == ModelKind::A && correlations.empty()) {
    throw std::invalid_argument("model A needs at least one correlation");
  }
  if (!(tau0sq > 0.0) || (model == ModelKind::A && !(tau1sq > 0.0))) {
    throw std::invalid_argument("random-effect variances must be positive");
  }
  if (!(x_within_sd > 0.0) || !(x_between_var > 0.0)) {
    throw std::invalid_argument("covariate spreads must be positive");
  }
  for (double s2 : sigma2_levels)
    if (!(s2 > 0.0)) throw std::invalid_argument("sigma2 levels must be positive");
  if (model == ModelKind::A) {
    for (double r : correlations)
      if (!(r >= -1.0 && r <= 1.0)) throw std::invalid_argument("correlation outside [-1, 1]");
  }
  for (int n : n_grid) {
    if (n < 2) throw std::invalid_argument("cluster size n must be at least 2");
    for (int J : J_grid) {
      if (J < n + 5) {
        throw std::invalid_argument("J = " + std::to_string(J) + " is too small for n = " +
                                    std::to_string(n) + " (need J >= n + 5)");
      }
    }
  }
}

Theta DemoConfig::theta0(double corr, double sigma2) const {
  Theta t;
  t.beta = beta;
  t.sigma2 = sigma2;
  if (model == ModelKind::B) {
    t.psi = Eigen::MatrixXd::Constant(1, 1, tau0sq);
  } else {
    double cov = corr * std::sqrt(tau0sq * tau1sq);
    t.psi.resize(2, 2);
    t.psi << tau0sq, cov, cov, tau1sq;
  }
  return t;
}

Eigen::MatrixXd moment_match(const Eigen::MatrixXd& raw, const Eigen::VectorXd& mean,
                             const Eigen::MatrixXd& cov) {
  const Eigen::Index rows = raw.rows(), k = raw.cols();
  if (mean.size() != k || cov.rows() != k || cov.cols() != k) {
    throw std::invalid_argument("moment_match: target dimensions do not match the sample");
  }
  if (rows <= k) throw std::invalid_argument("moment_match: need more rows than columns");

  Eigen::MatrixXd centered = raw.rowwise() - raw.colwise().mean();
  Eigen::MatrixXd sample_cov = centered.transpose() * centered / static_cast<double>(rows);
  Eigen::LLT<Eigen::MatrixXd> llt(sample_cov);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("moment_match: sample covariance is singular");
  }
  // White: W'W / rows = I.
  Eigen::MatrixXd white =
      llt.matrixU().transpose().solve(centered.transpose()).transpose();

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cov + cov.transpose()));
  Eigen::VectorXd lambda = es.eigenvalues();
  const double floor = 1e-12 * std::max(lambda.cwiseAbs().maxCoeff(), 1e-300);
  lambda = (lambda.array() > floor).select(lambda, 0.0);
  Eigen::MatrixXd factor = es.eigenvectors() * lambda.cwiseSqrt().asDiagonal();
  Eigen::MatrixXd out = white * factor.transpose();
  out.rowwise() += mean.transpose();
  return out;
}

MomentMatchedSample gen_moment_matched(int J, int n, const Theta& theta0, double x_between_mean,
                                       double x_between_var, double x_within_sd,
                                       std::uint64_t seed) {
  const Eigen::Index q = theta0.psi.rows();
  if (q != 1 && q != 2) throw std::invalid_argument("theta0 must have q = 1 or q = 2");
  if (theta0.beta.size() != 3) throw std::invalid_argument("theta0 must have three fixed effects");
  if (n < 2) throw std::invalid_argument("cluster size n must be at least 2");
  if (J < n + 5) {
    throw std::invalid_argument("J = " + std::to_string(J) + " is too small for n = " +
                                std::to_string(n) + " (need J >= n + 5)");
  }
  theta0.validate(3, q);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Shared within-cluster pattern with exact mean 0 and variance sd^2 (denominator n - 1).
  Eigen::VectorXd w(n);
  for (int i = 0; i < n; ++i) w(i) = normal(rng);
  w.array() -= w.mean();
  w *= std::sqrt((n - 1) * x_within_sd * x_within_sd / w.squaredNorm());

  const Eigen::Index k = n + 1 + q;
  Eigen::MatrixXd raw(J, k);
  for (Eigen::Index c = 0; c < k; ++c)
    for (Eigen::Index r = 0; r < J; ++r) raw(r, c) = normal(rng);

  Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
  mean(0) = x_between_mean;
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(k, k);
  cov(0, 0) = x_between_var;
  cov.block(1, 1, q, q) = theta0.psi;
  cov.bottomRightCorner(n, n).diagonal().setConstant(theta0.sigma2);

  Eigen::MatrixXd block = moment_match(raw, mean, cov);

  std::vector<double> y, x, xb;
  std::vector<std::string> ids;
  y.reserve(static_cast<std::size_t>(J) * n);
  x.reserve(y.capacity());
  xb.reserve(y.capacity());
  ids.reserve(y.capacity());
  const auto& beta = theta0.beta;
  for (int j = 0; j < J; ++j) {
    const double xj = block(j, 0), b0 = block(j, 1);
    const double b1 = q == 2 ? block(j, 2) : 0.0;
    std::string id = std::to_string(j + 1);
    for (int i = 0; i < n; ++i) {
      double xij = w(i);
      double e = block(j, 1 + q + i);
      y.push_back(beta(0) + beta(1) * xij + beta(2) * xj + b0 + b1 * xij + e);
      x.push_back(xij);
      xb.push_back(xj);
      ids.push_back(id);
    }
  }
  std::map<std::string, std::vector<double>> columns{
      {"y", std::move(y)}, {"x", std::move(x)}, {"xb", std::move(xb)}};
  return MomentMatchedSample{Dataset(std::move(columns), ids), std::move(block), std::move(mean),
                             std::move(cov)};
}

ModelSpec demo_spec(ModelKind kind) {
  return parse_formula(kind == ModelKind::A ? "y ~ 1 + x + xb + (1 + x | cluster)"
                                            : "y ~ 1 + x + xb + (1 | cluster)");
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Cell {
  double corr;
  double sigma2;
};

std::vector<Cell> cells_of(const DemoConfig& config) {
  std::vector<Cell> cells;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  if (config.model == ModelKind::A) {
    for (double r : config.correlations)
      for (double s2 : config.sigma2_levels) cells.push_back({r, s2});
  } else {
    for (double s2 : config.sigma2_levels) cells.push_back({nan, s2});
  }
  return cells;
}

bool same_corr(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

}  // namespace

std::uint64_t grid_seed(std::uint64_t seed, int n, int J) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(n));
  return splitmix64(h ^ (static_cast<std::uint64_t>(J) << 32));
}

std::vector<GridRow> demo_grid(const DemoConfig& config) {
  config.validate();
  std::vector<GridRow> rows;
  for (const auto& cell : cells_of(config)) {
    for (int n : config.n_grid) {
      for (int J : config.J_grid) {
        GridRow row;
        row.n = n;
        row.J = J;
        row.corr = cell.corr;
        row.sigma2 = cell.sigma2;
        rows.push_back(row);
      }
    }
  }
  const ModelSpec spec = demo_spec(config.model);
  parallel_for(rows.size(), config.threads, [&](std::size_t i) {
    GridRow& row = rows[i];
    Theta theta = config.theta0(std::isnan(row.corr) ? 0.0 : row.corr, row.sigma2);
    MomentMatchedSample sample =
        gen_moment_matched(row.J, row.n, theta, config.x_between_mean, config.x_between_var,
                           config.x_within_sd, grid_seed(config.seed, row.n, row.J));
    DesignSet designs = build_designs(sample.data, spec);
    InfoBlocks blocks = logdet_blocks(designs, theta);
    row.logdet_bb = blocks.logdet_bb;
    row.logdet_rr = blocks.logdet_rr;
  });
  return rows;
}

RegressionResult ols_regress(const std::vector<GridRow>& rows, Block block) {
  if (rows.size() < 4) throw std::invalid_argument("regression needs at least 4 grid points");
  const auto m = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd a(m, 3);
  Eigen::VectorXd y(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& r = rows[static_cast<std::size_t>(i)];
    a(i, 0) = 1.0;
    a(i, 1) = std::log(static_cast<double>(r.n));
    a(i, 2) = std::log(static_cast<double>(r.J));
    y(i) = block == Block::Fixed ? r.logdet_bb : r.logdet_rr;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < 3) {
    throw std::invalid_argument("regression design is rank deficient (log n and log J must vary)");
  }
  Eigen::VectorXd coef = qr.solve(y);
  double rss = (y - a * coef).squaredNorm();
  double s2 = m > 3 ? rss / static_cast<double>(m - 3) : 0.0;
  Eigen::MatrixXd ata_inv = (a.transpose() * a).inverse();
  RegressionResult out;
  out.block = block;
  out.intercept = coef(0);
  out.coef_logn = coef(1);
  out.coef_logJ = coef(2);
  out.se_intercept = std::sqrt(s2 * ata_inv(0, 0));
  out.se_logn = std::sqrt(s2 * ata_inv(1, 1));
  out.se_logJ = std::sqrt(s2 * ata_inv(2, 2));
  out.points = rows.size();
  return out;
}

ExpectedCoefficients expected_coefficients(const PenaltyCount& counts) {
  ExpectedCoefficients e;
  e.fixed_logn = counts.p1;
  e.fixed_logJ = counts.p;
  e.random_logn = counts.K1 - counts.p1;
  e.random_logJ = counts.q_star + 1;
  return e;
}

std::vector<CellRegression> regress_cells(const DemoConfig& config,
                                          const std::vector<GridRow>& rows) {
  std::vector<CellRegression> out;
  std::vector<std::vector<GridRow>> groups;
  for (const auto& row : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const CellRegression& c) {
      return same_corr(c.corr, row.corr) && c.sigma2 == row.sigma2;
    });
    if (it == out.end()) {
      CellRegression cell;
      cell.corr = row.corr;
      cell.sigma2 = row.sigma2;
      out.push_back(cell);
      groups.emplace_back();
      groups.back().push_back(row);
    } else {
      groups[static_cast<std::size_t>(it - out.begin())].push_back(row);
    }
  }
  const ModelSpec spec = demo_spec(config.model);
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& cell = out[i];
    cell.fixed = ols_regress(groups[i], Block::Fixed);
    cell.random = ols_regress(groups[i], Block::Random);
    Theta theta = config.theta0(std::isnan(cell.corr) ? 0.0 : cell.corr, cell.sigma2);
    const int n = config.n_grid.front(), J = config.J_grid.front();
    MomentMatchedSample sample =
        gen_moment_matched(J, n, theta, config.x_between_mean, config.x_between_var,
                           config.x_within_sd, grid_seed(config.seed, n, J));
    cell.expected = expected_coefficients(
        count_penalty(build_designs(sample.data, spec), theta.psi));
  }
  return out;
}

void write_grid_csv(std::ostream& out, const std::vector<GridRow>& rows) {
  out << "n,J,corr,sigma2,logdet_bb,logdet_rr\n";
  for (const auto& r : rows) {
    out << r.n << ',' << r.J << ',' << format_double(r.corr) << ',' << format_double(r.sigma2)
        << ',' << format_double(r.logdet_bb) << ',' << format_double(r.logdet_rr) << '\n';
  }
}

void write_regression_csv(std::ostream& out, const std::vector<CellRegression>& cells) {
  out << "corr,sigma2,block,intercept,coef_logn,coef_logJ,se_intercept,se_logn,se_logJ,"
         "expected_logn,expected_logJ,points\n";
  for (const auto& c : cells) {
    for (const RegressionResult* r : {&c.fixed, &c.random}) {
      bool fixed = r->block == Block::Fixed;
      out << format_double(c.corr) << ',' << format_double(c.sigma2) << ',' << to_string(r->block)
          << ',' << format_double(r->intercept) << ',' << format_double(r->coef_logn) << ','
          << format_double(r->coef_logJ) << ',' << format_double(r->se_intercept) << ','
          << format_double(r->se_logn) << ',' << format_double(r->se_logJ) << ','
          << format_double(fixed ? c.expected.fixed_logn : c.expected.random_logn) << ','
          << format_double(fixed ? c.expected.fixed_logJ : c.expected.random_logJ) << ','
          << r->points << '\n';
    }
  }
}

namespace {

std::string marker_shape(double sigma2, double cx, double cy) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  const double r = 5.0;
  if (std::abs(sigma2 - 1.0) < 1e-9) {
    s << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << r << "\"";
  } else if (std::abs(sigma2 - 10.0) < 1e-9) {
    s << "<polygon points=\"" << cx << ',' << cy - r << ' ' << cx - r << ',' << cy + r << ' '
      << cx + r << ',' << cy + r << "\"";
  } else if (std::abs(sigma2 - 42.78) < 1e-9) {
    s << "<rect x=\"" << cx - r << "\" y=\"" << cy - r << "\" width=\"" << 2 * r
      << "\" height=\"" << 2 * r << "\"";
  } else {
    s << "<polygon points=\"" << cx << ',' << cy - r << ' ' << cx + r << ',' << cy << ' ' << cx
      << ',' << cy + r << ' ' << cx - r << ',' << cy << "\"";
  }
  return s.str();
}

const char* marker_name(double sigma2) {
  if (std::abs(sigma2 - 1.0) < 1e-9) return "circle";
  if (std::abs(sigma2 - 10.0) < 1e-9) return "triangle";
  if (std::abs(sigma2 - 42.78) < 1e-9) return "square";
  return "diamond";
}

}  // namespace

void write_figure_svg(std::ostream& out, ModelKind kind, const std::vector<CellRegression>& cells) {
  const double width = 900, height = 720, margin_l = 70, margin_t = 50, gap = 70;
  const double pw = (width - margin_l - gap - 30) / 2.0;
  const double ph = (height - margin_t - gap - 60) / 2.0;

  std::vector<double> sigmas;
  for (const auto& c : cells)
    if (std::find(sigmas.begin(), sigmas.end(), c.sigma2) == sigmas.end()) sigmas.push_back(c.sigma2);

  // Model A is plotted against the correlation; model B has one column per sigma2.
  auto x_value = [&](const CellRegression& c) {
    if (kind == ModelKind::A) return c.corr;
    return static_cast<double>(std::find(sigmas.begin(), sigmas.end(), c.sigma2) - sigmas.begin());
  };
  double x_lo = kind == ModelKind::A ? -1.1 : -0.5;
  double x_hi = kind == ModelKind::A ? 0.1 : static_cast<double>(sigmas.size()) - 0.5;
  if (kind == ModelKind::A) {
    for (const auto& c : cells) {
      x_lo = std::min(x_lo, c.corr - 0.1);
      x_hi = std::max(x_hi, c.corr + 0.1);
    }
  }

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">Model "
      << to_string(kind) << ": regression coefficients of the block log-determinants</text>\n";

  struct Panel {
    Block block;
    bool logn;
    const char* title;
  };
  const Panel panels[4] = {{Block::Fixed, true, "fixed effects: log n"},
                           {Block::Fixed, false, "fixed effects: log J"},
                           {Block::Random, true, "random effects: log n"},
                           {Block::Random, false, "random effects: log J"}};

  for (int k = 0; k < 4; ++k) {
    const Panel& panel = panels[k];
    const double ox = margin_l + (k % 2) * (pw + gap);
    const double oy = margin_t + (k / 2) * (ph + gap);
    auto coef = [&](const CellRegression& c) {
      const RegressionResult& r = panel.block == Block::Fixed ? c.fixed : c.random;
      return panel.logn ? r.coef_logn : r.coef_logJ;
    };
    auto expected = [&](const CellRegression& c) {
      if (panel.block == Block::Fixed)
        return panel.logn ? c.expected.fixed_logn : c.expected.fixed_logJ;
      return panel.logn ? c.expected.random_logn : c.expected.random_logJ;
    };
    double y_lo = std::numeric_limits<double>::infinity(), y_hi = -y_lo;
    for (const auto& c : cells) {
      y_lo = std::min({y_lo, coef(c), expected(c)});
      y_hi = std::max({y_hi, coef(c), expected(c)});
    }
    double pad = std::max(0.25, 0.1 * (y_hi - y_lo));
    y_lo -= pad;
    y_hi += pad;
    auto sx = [&](double v) { return ox + (v - x_lo) / (x_hi - x_lo) * pw; };
    auto sy = [&](double v) { return oy + ph - (v - y_lo) / (y_hi - y_lo) * ph; };

    out << "<g class=\"panel\" data-block=\"" << to_string(panel.block) << "\" data-term=\""
        << (panel.logn ? "logn" : "logJ") << "\">\n";
    out << "<rect x=\"" << ox << "\" y=\"" << oy << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    out << "<text x=\"" << ox + pw / 2 << "\" y=\"" << oy - 8 << "\" text-anchor=\"middle\">"
        << panel.title << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
      double v = y_lo + (y_hi - y_lo) * t / 4.0;
      out << "<text x=\"" << ox - 6 << "\" y=\"" << sy(v) + 4 << "\" text-anchor=\"end\">"
          << std::fixed << std::setprecision(2) << v << "</text>\n";
      out.unsetf(std::ios::fixed);
    }
    if (kind == ModelKind::A) {
      std::vector<double> ticks;
      for (const auto& c : cells)
        if (std::find(ticks.begin(), ticks.end(), c.corr) == ticks.end()) ticks.push_back(c.corr);
      for (double t : ticks) {
        out << "<text x=\"" << sx(t) << "\" y=\"" << oy + ph + 16 << "\" text-anchor=\"middle\">"
            << t << "</text>\n";
      }
      out << "<text x=\"" << ox + pw / 2 << "\" y=\"" << oy + ph + 34
          << "\" text-anchor=\"middle\">correlation</text>\n";
    } else {
      for (std::size_t s = 0; s < sigmas.size(); ++s) {
        out << "<text x=\"" << sx(static_cast<double>(s)) << "\" y=\"" << oy + ph + 16
            << "\" text-anchor=\"middle\">sigma2 = " << sigmas[s] << "</text>\n";
      }
    }

    // Expected values: one line per distinct value, red dashed if it comes
    // only from singular cells.
    std::vector<std::pair<double, bool>> lines;
    for (const auto& c : cells) {
      double v = expected(c);
      bool singular = kind == ModelKind::A && c.corr <= -1.0;
      auto it = std::find_if(lines.begin(), lines.end(),
                             [&](const auto& l) { return std::abs(l.first - v) < 1e-12; });
      if (it == lines.end()) {
        lines.emplace_back(v, singular);
      } else if (!singular) {
        it->second = false;
      }
    }
    for (const auto& [v, singular] : lines) {
      out << "<line class=\"expected\" data-value=\"" << v << "\" x1=\"" << ox << "\" x2=\""
          << ox + pw << "\" y1=\"" << sy(v) << "\" y2=\"" << sy(v) << "\" stroke=\""
          << (singular ? "red" : "blue") << "\"" << (singular ? " stroke-dasharray=\"6,4\"" : "")
          << "/>\n";
    }

    for (const auto& c : cells) {
      std::size_t si =
          static_cast<std::size_t>(std::find(sigmas.begin(), sigmas.end(), c.sigma2) - sigmas.begin());
      double jitter = kind == ModelKind::A
                          ? (static_cast<double>(si) - (static_cast<double>(sigmas.size()) - 1) / 2) * 8.0
                          : 0.0;
      out << marker_shape(c.sigma2, sx(x_value(c)) + jitter, sy(coef(c)))
          << " class=\"marker\" data-shape=\"" << marker_name(c.sigma2) << "\" data-sigma2=\""
          << format_double(c.sigma2) << "\" data-corr=\"" << format_double(c.corr)
          << "\" data-value=\"" << format_double(coef(c))
          << "\" fill=\"none\" stroke=\"black\"/>\n";
    }
    out << "</g>\n";
  }

  // Legend.
  double lx = margin_l, ly = height - 20;
  for (double s2 : sigmas) {
    out << marker_shape(s2, lx, ly - 4) << " fill=\"none\" stroke=\"black\"/>\n";
    out << "<text x=\"" << lx + 10 << "\" y=\"" << ly << "\">sigma2 = " << s2 << "</text>\n";
    lx += 130;
  }
  out << "<line x1=\"" << lx << "\" x2=\"" << lx + 30 << "\" y1=\"" << ly - 4 << "\" y2=\""
      << ly - 4 << "\" stroke=\"blue\"/>\n<text x=\"" << lx + 36 << "\" y=\"" << ly
      << "\">expected (full rank)</text>\n";
  if (kind == ModelKind::A) {
    lx += 190;
    out << "<line x1=\"" << lx << "\" x2=\"" << lx + 30 << "\" y1=\"" << ly - 4 << "\" y2=\""
        << ly - 4 << "\" stroke=\"red\" stroke-dasharray=\"6,4\"/>\n<text x=\"" << lx + 36
        << "\" y=\"" << ly << "\">expected (singular)</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace mlmbic
