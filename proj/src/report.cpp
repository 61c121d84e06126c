#include <algorithm>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "mlmbic/bic.hpp"
#include "mlmbic/format.hpp"

namespace mlmbic {

namespace {

using ordered_json = nlohmann::ordered_json;

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

std::string join(const std::vector<std::string>& parts, const char* sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

std::vector<std::string> all_warnings(const CandidateResult& c) {
  std::vector<std::string> w = c.warnings;
  if (!c.ok) w.insert(w.begin(), "failed: " + c.error);
  return w;
}

}  // namespace

void write_report_json(std::ostream& out, const BicReport& report) {
  ordered_json doc;
  doc["N"] = report.N;
  doc["J"] = report.J;
  ordered_json rows = ordered_json::array();
  for (const auto& c : report.candidates) {
    ordered_json row;
    row["label"] = c.label;
    row["fixed"] = format_terms(c.spec.fixed_terms);
    row["random"] = format_terms(c.spec.random_terms);
    if (c.ok) {
      row["deviance"] = c.fit.deviance;
      row["K1"] = c.counts.K1;
      row["K2"] = c.counts.K2;
      row["K"] = c.counts.K;
      row["bic_e"] = c.bic.bic_e;
      row["bic_n"] = c.bic.bic_n;
      row["bic_j"] = c.bic.bic_j;
      row["rank_e"] = c.rank_e;
      row["rank_n"] = c.rank_n;
      row["rank_j"] = c.rank_j;
    } else {
      for (const char* key : {"deviance", "K1", "K2", "K", "bic_e", "bic_n", "bic_j", "rank_e",
                              "rank_n", "rank_j"})
        row[key] = nullptr;
    }
    row["warnings"] = all_warnings(c);
    rows.push_back(std::move(row));
  }
  doc["candidates"] = std::move(rows);
  out << doc.dump(2) << '\n';
}

void write_report_csv(std::ostream& out, const BicReport& report) {
  out << "label,fixed,random,deviance,K1,K2,K,bic_e,bic_n,bic_j,rank_e,rank_n,rank_j,warnings\n";
  for (const auto& c : report.candidates) {
    out << csv_field(c.label) << ',' << csv_field(format_terms(c.spec.fixed_terms)) << ','
        << csv_field(format_terms(c.spec.random_terms)) << ',';
    if (c.ok) {
      out << format_double(c.fit.deviance) << ',' << c.counts.K1 << ',' << c.counts.K2 << ','
          << c.counts.K << ',' << format_double(c.bic.bic_e) << ',' << format_double(c.bic.bic_n) << ','
          << format_double(c.bic.bic_j) << ',' << c.rank_e << ',' << c.rank_n << ',' << c.rank_j;
    } else {
      out << ",,,,,,,,,";
    }
    out << ',' << csv_field(join(all_warnings(c), "; ")) << '\n';
  }
}

void print_report_table(std::ostream& out, const BicReport& report) {
  out << "N = " << report.N << ", J = " << report.J << "\n\n";
  out << std::left << std::setw(12) << "model" << std::setw(34) << "fixed" << std::setw(14)
      << "random" << std::right << std::setw(4) << "K1" << std::setw(4) << "K2" << std::setw(11)
      << "deviance" << std::setw(14) << "BIC_E" << std::setw(14) << "BIC_N" << std::setw(14)
      << "BIC_J" << '\n';
  auto cell = [](double v, int rank) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << v << '(' << rank << ')';
    return s.str();
  };
  for (const auto& c : report.candidates) {
    out << std::left << std::setw(12) << c.label << std::setw(34)
        << format_terms(c.spec.fixed_terms) << std::setw(14) << format_terms(c.spec.random_terms);
    if (!c.ok) {
      out << "failed: " << c.error << '\n';
      continue;
    }
    bool disagree = c.rank_e != c.rank_n || c.rank_e != c.rank_j;
    out << std::right << std::setw(4) << c.counts.K1 << std::setw(4) << c.counts.K2
        << std::setw(11) << std::fixed << std::setprecision(1) << c.fit.deviance
        << std::setw(14) << cell(c.bic.bic_e, c.rank_e) << std::setw(14)
        << cell(c.bic.bic_n, c.rank_n) << std::setw(14) << cell(c.bic.bic_j, c.rank_j)
        << (disagree ? "  *" : "") << '\n';
    out.unsetf(std::ios::fixed);
    for (const auto& w : c.warnings) out << "    warning: " << w << '\n';
  }

  auto winner = [&](int CandidateResult::*rank) -> std::string {
    for (const auto& c : report.candidates)
      if (c.ok && c.*rank == 1) return c.label;
    return "none";
  };
  std::string we = winner(&CandidateResult::rank_e), wn = winner(&CandidateResult::rank_n),
              wj = winner(&CandidateResult::rank_j);
  out << "\nselected: BIC_E " << we << ", BIC_N " << wn << ", BIC_J " << wj << '\n';
  if (we != wn || we != wj) out << "the criteria disagree on the selected model\n";
  bool any_disagree = std::any_of(report.candidates.begin(), report.candidates.end(),
                                  [](const CandidateResult& c) {
                                    return c.ok && (c.rank_e != c.rank_n || c.rank_e != c.rank_j);
                                  });
  if (any_disagree) out << "* ranks differ across criteria\n";
}

}  // namespace mlmbic
