#include "cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mlmbic/bic.hpp"
#include "mlmbic/dataio.hpp"
#include "mlmbic/fisher.hpp"
#include "mlmbic/lmmfit.hpp"
#include "mlmbic/simlab.hpp"

namespace mlmbic::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// Raised for bad flags or config contents; maps to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::ofstream open_output(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  return f;
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("invalid config " + path + ": " + e.what());
  }
}

// ---- fit ----

struct FitArgs {
  std::string data;
  std::string format = "csv";
  std::string group;
  std::string formula;
  std::string out_json;
};

int cmd_fit(const FitArgs& a, std::ostream& out) {
  ModelSpec spec = parse_formula(a.formula);
  const std::string group = a.group.empty() ? spec.group : a.group;
  if (group != spec.group) {
    throw UsageError("--group " + group + " differs from the formula's grouping variable " +
                     spec.group);
  }
  Dataset data = load_table(a.data, parse_table_format(a.format), group);
  DesignSet designs = build_designs(data, spec);
  FitResult fit = fit_ml(designs);
  const Theta& th = fit.theta_hat;

  out << "model: " << spec.to_string() << '\n';
  out << "N = " << designs.num_obs() << ", J = " << designs.num_clusters() << '\n';
  out << "converged: " << (fit.converged ? "yes" : "no") << " (" << fit.message << ", "
      << fit.iterations << " iterations, gradient norm " << fit.gradient_norm << ")\n";
  out << std::fixed << std::setprecision(4);
  out << "loglik: " << fit.loglik << "\ndeviance: " << std::setprecision(1) << fit.deviance
      << '\n'
      << std::setprecision(4);
  out << "fixed effects:\n";
  for (std::size_t k = 0; k < spec.fixed_terms.size(); ++k) {
    out << "  " << std::left << std::setw(20) << spec.fixed_terms[k].to_string() << std::right
        << std::setw(12) << th.beta(static_cast<Eigen::Index>(k)) << '\n';
  }
  out << "random-effect covariance:\n";
  for (std::size_t r = 0; r < spec.random_terms.size(); ++r) {
    for (std::size_t c = 0; c <= r; ++c) {
      std::string name = r == c ? "var(" + spec.random_terms[r].to_string() + ")"
                                : "cov(" + spec.random_terms[c].to_string() + ", " +
                                      spec.random_terms[r].to_string() + ")";
      out << "  " << std::left << std::setw(20) << name << std::right << std::setw(12)
          << th.psi(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) << '\n';
    }
  }
  out << "  " << std::left << std::setw(20) << "sigma2" << std::right << std::setw(12)
      << th.sigma2 << '\n';
  std::optional<double> icc_value;
  if (spec.q() == 1 && spec.random_terms[0].is_intercept()) {
    icc_value = icc(th);
    out << "ICC: " << std::setprecision(3) << *icc_value << '\n';
  }
  for (std::size_t k = 0; k < fit.boundary_flags.size(); ++k) {
    if (fit.boundary_flags[k]) {
      out << "warning: variance of " << spec.random_terms[k].to_string()
          << " estimated at the boundary\n";
    }
  }
  out.unsetf(std::ios::fixed);
  out << std::setprecision(6);

  if (!a.out_json.empty()) {
    ordered_json doc;
    doc["formula"] = spec.to_string();
    doc["N"] = designs.num_obs();
    doc["J"] = designs.num_clusters();
    doc["converged"] = fit.converged;
    doc["message"] = fit.message;
    doc["iterations"] = fit.iterations;
    doc["gradient_norm"] = fit.gradient_norm;
    doc["loglik"] = fit.loglik;
    doc["deviance"] = fit.deviance;
    ordered_json beta = ordered_json::object();
    for (std::size_t k = 0; k < spec.fixed_terms.size(); ++k)
      beta[spec.fixed_terms[k].to_string()] = th.beta(static_cast<Eigen::Index>(k));
    doc["beta"] = beta;
    ordered_json psi = ordered_json::array();
    for (Eigen::Index r = 0; r < th.psi.rows(); ++r) {
      ordered_json row = ordered_json::array();
      for (Eigen::Index c = 0; c < th.psi.cols(); ++c) row.push_back(th.psi(r, c));
      psi.push_back(row);
    }
    doc["psi"] = psi;
    doc["sigma2"] = th.sigma2;
    if (icc_value) doc["icc"] = *icc_value;
    doc["boundary"] = fit.boundary_flags;
    auto f = open_output(a.out_json);
    f << doc.dump(2) << '\n';
  }
  return fit.converged ? kOk : kNotConverged;
}

// ---- select ----

struct SelectArgs {
  std::string config;
  std::string data;
  std::string format;
  std::string group;
  std::string out_json;
  std::string out_csv;
};

std::vector<TermSet> parse_term_sets(const json& list, const char* key) {
  if (!list.is_array() || list.empty()) {
    throw UsageError(std::string("config '") + key + "' must be a nonempty array");
  }
  std::vector<TermSet> sets;
  for (const auto& item : list) {
    TermSet set;
    if (item.is_string()) {
      set.terms = parse_terms(item.get<std::string>());
    } else if (item.is_object() && item.contains("terms")) {
      set.label = item.value("label", "");
      const auto& terms = item["terms"];
      if (terms.is_string()) {
        set.terms = parse_terms(terms.get<std::string>());
      } else if (terms.is_array()) {
        std::string joined;
        for (const auto& t : terms) joined += (joined.empty() ? "" : " + ") + t.get<std::string>();
        set.terms = parse_terms(joined);
      } else {
        throw UsageError(std::string("config '") + key + "': terms must be a string or array");
      }
    } else {
      throw UsageError(std::string("config '") + key + "': entries need a 'terms' field");
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

std::string require_string(const json& cfg, const char* key) {
  if (!cfg.contains(key) || !cfg[key].is_string()) {
    throw UsageError(std::string("config is missing string field '") + key + "'");
  }
  return cfg[key].get<std::string>();
}

int cmd_select(const SelectArgs& a, std::ostream& out) {
  json cfg = read_json_file(a.config);
  if (!cfg.is_object()) throw UsageError("config must be a JSON object");
  const fs::path base = fs::path(a.config).parent_path();
  auto from_config = [&](const std::string& key) -> std::string {
    return cfg.contains(key) && cfg[key].is_string() ? cfg[key].get<std::string>() : "";
  };
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };

  std::string data_path = a.data;
  if (data_path.empty()) data_path = resolve(require_string(cfg, "data"));
  std::string format = !a.format.empty() ? a.format : from_config("format");
  if (format.empty()) format = "csv";
  std::string group = !a.group.empty() ? a.group : require_string(cfg, "group");
  std::string response = require_string(cfg, "response");
  std::string out_json = !a.out_json.empty() ? a.out_json : from_config("out_json");
  std::string out_csv = !a.out_csv.empty() ? a.out_csv : from_config("out_csv");
  if (a.out_json.empty() && !out_json.empty()) out_json = resolve(out_json);
  if (a.out_csv.empty() && !out_csv.empty()) out_csv = resolve(out_csv);

  SelectOptions options;
  if (cfg.contains("rank_tol")) options.rank_tol = cfg["rank_tol"].get<double>();
  if (cfg.contains("threads")) options.threads = cfg["threads"].get<unsigned>();

  auto fixed = parse_term_sets(cfg.value("fixed", json()), "fixed");
  auto random = parse_term_sets(cfg.value("random", json()), "random");

  Dataset data = load_table(data_path, parse_table_format(format), group);
  BicReport report = enumerate_and_rank(data, response, group, fixed, random, options);
  print_report_table(out, report);
  if (!out_json.empty()) {
    auto f = open_output(out_json);
    write_report_json(f, report);
  }
  if (!out_csv.empty()) {
    auto f = open_output(out_csv);
    write_report_csv(f, report);
  }
  bool any = std::any_of(report.candidates.begin(), report.candidates.end(),
                         [](const CandidateResult& c) { return c.ok; });
  return any ? kOk : kUsageOrDataError;
}

// ---- demo ----

struct DemoArgs {
  std::string config;
  std::string model;
  std::vector<double> corr;
  std::vector<double> sigma2;
  std::vector<int> n;
  std::vector<int> J;
  std::optional<std::uint64_t> seed;
  std::string out_csv;
  std::string out_reg;
  std::string out_svg;
};

template <typename T>
void read_list(const json& cfg, const char* key, std::vector<T>& dst) {
  if (cfg.contains(key)) dst = cfg[key].get<std::vector<T>>();
}

DemoConfig demo_config(const DemoArgs& a) {
  DemoConfig c;
  if (!a.config.empty()) {
    json cfg = read_json_file(a.config);
    if (cfg.contains("model")) c.model = parse_model_kind(cfg["model"].get<std::string>());
    if (cfg.contains("beta")) {
      auto b = cfg["beta"].get<std::vector<double>>();
      if (b.size() != 3) throw UsageError("config 'beta' needs three values");
      c.beta = Eigen::Vector3d(b[0], b[1], b[2]);
    }
    c.tau0sq = cfg.value("tau0sq", c.tau0sq);
    c.tau1sq = cfg.value("tau1sq", c.tau1sq);
    read_list(cfg, "correlations", c.correlations);
    read_list(cfg, "sigma2_levels", c.sigma2_levels);
    read_list(cfg, "n_grid", c.n_grid);
    read_list(cfg, "J_grid", c.J_grid);
    c.x_within_sd = cfg.value("x_within_sd", c.x_within_sd);
    c.x_between_mean = cfg.value("x_between_mean", c.x_between_mean);
    c.x_between_var = cfg.value("x_between_var", c.x_between_var);
    c.seed = cfg.value("seed", c.seed);
  }
  if (!a.model.empty()) c.model = parse_model_kind(a.model);
  if (!a.corr.empty()) c.correlations = a.corr;
  if (!a.sigma2.empty()) c.sigma2_levels = a.sigma2;
  if (!a.n.empty()) c.n_grid = a.n;
  if (!a.J.empty()) c.J_grid = a.J;
  if (a.seed) c.seed = *a.seed;
  c.validate();
  return c;
}

int cmd_demo(const DemoArgs& a, std::ostream& out) {
  DemoConfig config = demo_config(a);
  std::vector<GridRow> rows = demo_grid(config);
  if (!a.out_csv.empty()) {
    auto f = open_output(a.out_csv);
    write_grid_csv(f, rows);
  }

  out << "model " << to_string(config.model) << ", seed " << config.seed << ", "
      << rows.size() << " design points\n";
  if (config.n_grid.size() < 2 || config.J_grid.size() < 2 ||
      config.n_grid.size() * config.J_grid.size() < 4) {
    out << "grid too small to regress on log n and log J; wrote grid rows only\n";
    if (!a.out_csv.empty()) return kOk;
    write_grid_csv(out, rows);
    return kOk;
  }

  std::vector<CellRegression> cells = regress_cells(config, rows);
  out << '\n'
      << std::setw(6) << "corr" << std::setw(8) << "sigma2" << std::setw(8) << "block"
      << std::setw(18) << "log n (SE)" << std::setw(10) << "expected" << std::setw(18)
      << "log J (SE)" << std::setw(10) << "expected" << '\n';
  out << std::fixed;
  for (const auto& c : cells) {
    for (const RegressionResult* r : {&c.fixed, &c.random}) {
      bool fixed = r->block == Block::Fixed;
      std::ostringstream ln, lj;
      ln << std::fixed << std::setprecision(3) << r->coef_logn << " (" << r->se_logn << ")";
      lj << std::fixed << std::setprecision(3) << r->coef_logJ << " (" << r->se_logJ << ")";
      out << std::setw(6);
      if (std::isnan(c.corr)) {
        out << "-";
      } else {
        out << std::setprecision(1) << c.corr;
      }
      out << std::setw(8) << std::setprecision(2) << c.sigma2 << std::setw(8)
          << to_string(r->block) << std::setw(18) << ln.str() << std::setw(10)
          << std::setprecision(0) << (fixed ? c.expected.fixed_logn : c.expected.random_logn)
          << std::setw(18) << lj.str() << std::setw(10)
          << (fixed ? c.expected.fixed_logJ : c.expected.random_logJ) << '\n';
    }
  }
  out.unsetf(std::ios::fixed);
  out << std::setprecision(6);

  if (!a.out_reg.empty()) {
    auto f = open_output(a.out_reg);
    write_regression_csv(f, cells);
  }
  if (!a.out_svg.empty()) {
    auto f = open_output(a.out_svg);
    write_figure_svg(f, config.model, cells);
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-level linear mixed models: ML fitting and BIC-based model selection"};
  app.require_subcommand(1);

  FitArgs fit;
  auto* fit_cmd = app.add_subcommand("fit", "Fit one model by maximum likelihood");
  fit_cmd->add_option("--data", fit.data, "Data file")->required();
  fit_cmd->add_option("--format", fit.format, "csv or ws")->check(CLI::IsMember({"csv", "ws", "whitespace"}));
  fit_cmd->add_option("--group", fit.group, "Grouping variable (defaults to the formula's)");
  fit_cmd->add_option("--formula", fit.formula, "e.g. \"y ~ 1 + x + (1 | g)\"")->required();
  fit_cmd->add_option("--out-json", fit.out_json, "Write the fit as JSON");

  SelectArgs sel;
  auto* sel_cmd = app.add_subcommand("select", "Fit and rank candidate models");
  sel_cmd->add_option("--config", sel.config, "JSON candidate configuration")->required();
  sel_cmd->add_option("--data", sel.data, "Override the config's data path");
  sel_cmd->add_option("--format", sel.format, "csv or ws")->check(CLI::IsMember({"csv", "ws", "whitespace"}));
  sel_cmd->add_option("--group", sel.group, "Override the grouping variable");
  sel_cmd->add_option("--out-json", sel.out_json, "Write the report as JSON");
  sel_cmd->add_option("--out-csv", sel.out_csv, "Write the report as CSV");

  DemoArgs demo;
  auto* demo_cmd = app.add_subcommand("demo", "Information log-determinants over a design grid");
  demo_cmd->add_option("--config", demo.config, "JSON demo configuration");
  demo_cmd->add_option("--model", demo.model, "A or B")->check(CLI::IsMember({"A", "B", "a", "b"}));
  demo_cmd->add_option("--corr", demo.corr, "Random-effect correlations (model A)")->delimiter(',');
  demo_cmd->add_option("--sigma2", demo.sigma2, "Residual variances")->delimiter(',');
  demo_cmd->add_option("--n", demo.n, "Cluster sizes")->delimiter(',');
  demo_cmd->add_option("--J", demo.J, "Cluster counts")->delimiter(',');
  demo_cmd->add_option("--seed", demo.seed, "Generator seed");
  demo_cmd->add_option("--out-csv", demo.out_csv, "Write grid rows as CSV");
  demo_cmd->add_option("--out-reg", demo.out_reg, "Write regressions as CSV");
  demo_cmd->add_option("--out-svg", demo.out_svg, "Write the coefficient figure");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageOrDataError;
  }

  try {
    if (*fit_cmd) return cmd_fit(fit, out);
    if (*sel_cmd) return cmd_select(sel, out);
    if (*demo_cmd) return cmd_demo(demo, out);
  } catch (const FormulaError& e) {
    err << "error: " << e.what() << " (at offset " << e.offset() << ")\n";
    return kUsageOrDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageOrDataError;
  }
  return kUsageOrDataError;
}

}  // namespace mlmbic::cli
