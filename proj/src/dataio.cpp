#include "mlmbic/dataio.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <optional>
#include <sstream>
#include <unordered_map>

namespace mlmbic {

FormulaError::FormulaError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " at offset " + std::to_string(offset)), offset_(offset) {}

TableFormat parse_table_format(std::string_view name) {
  if (name == "csv") return TableFormat::Csv;
  if (name == "ws" || name == "whitespace") return TableFormat::Whitespace;
  throw DataError("unknown table format '" + std::string(name) + "' (expected csv or ws)");
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(std::map<std::string, std::vector<double>> columns,
                 const std::vector<std::string>& cluster_ids)
    : columns_(std::move(columns)), num_rows_(cluster_ids.size()) {
  for (const auto& [name, values] : columns_) {
    if (values.size() != num_rows_) {
      throw DataError("column '" + name + "' has " + std::to_string(values.size()) +
                      " entries, expected " + std::to_string(num_rows_));
    }
  }
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t row = 0; row < cluster_ids.size(); ++row) {
    auto [it, inserted] = index.try_emplace(cluster_ids[row], clusters_.size());
    if (inserted) clusters_.push_back({cluster_ids[row], {}});
    clusters_[it->second].rows.push_back(row);
  }
  if (clusters_.size() < 2) {
    throw DataError("need at least 2 clusters, found " + std::to_string(clusters_.size()));
  }
}

bool Dataset::has_column(const std::string& name) const { return columns_.contains(name); }

const std::vector<double>& Dataset::column(const std::string& name) const {
  auto it = columns_.find(name);
  if (it == columns_.end()) throw DataError("unknown variable '" + name + "'");
  return it->second;
}

std::vector<std::string> Dataset::column_names() const {
  std::vector<std::string> names;
  names.reserve(columns_.size());
  for (const auto& entry : columns_) names.push_back(entry.first);
  return names;
}

// ---------------------------------------------------------------------------
// Table reading

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::string_view unquote(std::string_view s) {
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    s.remove_prefix(1);
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string> split_fields(const std::string& line, TableFormat format) {
  std::vector<std::string> fields;
  if (format == TableFormat::Csv) {
    std::size_t start = 0;
    while (true) {
      std::size_t comma = line.find(',', start);
      std::string_view field(line.data() + start,
                             (comma == std::string::npos ? line.size() : comma) - start);
      fields.emplace_back(unquote(trim(field)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  } else {
    std::istringstream ss(line);
    std::string token;
    while (ss >> token) fields.emplace_back(unquote(token));
  }
  return fields;
}

std::optional<double> parse_number(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return value;
}

bool blank(const std::string& line) { return trim(line).empty(); }

}  // namespace

Dataset read_table(std::istream& in, TableFormat format, const std::string& group) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) continue;
    header = split_fields(line, format);
    break;
  }
  if (header.empty()) throw DataError("table is empty (no header row)");

  auto group_it = std::find(header.begin(), header.end(), group);
  if (group_it == header.end()) throw DataError("group column '" + group + "' not found");
  const auto group_col = static_cast<std::size_t>(group_it - header.begin());

  std::vector<std::vector<double>> values(header.size());
  std::vector<std::string> cluster_ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) continue;
    auto fields = split_fields(line, format);
    if (fields.size() != header.size()) {
      throw DataError("line " + std::to_string(line_no) + ": expected " +
                      std::to_string(header.size()) + " fields, found " +
                      std::to_string(fields.size()));
    }
    for (std::size_t c = 0; c < fields.size(); ++c) {
      if (c == group_col) {
        cluster_ids.push_back(fields[c]);
        continue;
      }
      auto v = parse_number(fields[c]);
      if (!v) {
        throw DataError("line " + std::to_string(line_no) + ", column '" + header[c] +
                        "': non-numeric value '" + fields[c] + "'");
      }
      values[c].push_back(*v);
    }
  }

  std::map<std::string, std::vector<double>> columns;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == group_col) continue;
    if (columns.contains(header[c])) throw DataError("duplicate column '" + header[c] + "'");
    columns.emplace(header[c], std::move(values[c]));
  }
  return Dataset(std::move(columns), cluster_ids);
}

Dataset load_table(const std::filesystem::path& path, TableFormat format,
                   const std::string& group) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return read_table(in, format, group);
}

// ---------------------------------------------------------------------------
// Terms and formulas

std::string Term::to_string() const {
  if (is_intercept()) return "1";
  if (is_interaction()) return first + ":" + second;
  return first;
}

bool operator==(const Term& lhs, const Term& rhs) {
  return (lhs.first == rhs.first && lhs.second == rhs.second) ||
         (lhs.is_interaction() && lhs.first == rhs.second && lhs.second == rhs.first);
}

std::string format_terms(const std::vector<Term>& terms) {
  std::string out;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (i) out += " + ";
    out += terms[i].to_string();
  }
  return out;
}

std::string ModelSpec::to_string() const {
  return response + " ~ " + format_terms(fixed_terms) + " + (" + format_terms(random_terms) +
         " | " + group + ")";
}

namespace {

enum class Tok { Ident, One, Tilde, Plus, LParen, RParen, Bar, Colon, End };

struct Token {
  Tok kind;
  std::string text;
  std::size_t offset;
};

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.';
}

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
      continue;
    }
    if (ident_start(c)) {
      std::size_t start = i;
      while (i < text.size() && ident_char(text[i])) ++i;
      out.push_back({Tok::Ident, std::string(text.substr(start, i - start)), start});
      continue;
    }
    if (std::isdigit(static_cast<unsigned char>(c))) {
      std::size_t start = i;
      while (i < text.size() && (ident_char(text[i]))) ++i;
      auto lexeme = text.substr(start, i - start);
      if (lexeme != "1") throw FormulaError("unknown token '" + std::string(lexeme) + "'", start);
      out.push_back({Tok::One, "1", start});
      continue;
    }
    Tok kind;
    switch (c) {
      case '~': kind = Tok::Tilde; break;
      case '+': kind = Tok::Plus; break;
      case '(': kind = Tok::LParen; break;
      case ')': kind = Tok::RParen; break;
      case '|': kind = Tok::Bar; break;
      case ':': kind = Tok::Colon; break;
      default: throw FormulaError(std::string("unknown token '") + c + "'", i);
    }
    out.push_back({kind, std::string(1, c), i});
    ++i;
  }
  out.push_back({Tok::End, "", text.size()});
  return out;
}

class Parser {
 public:
  explicit Parser(std::string_view text) : tokens_(tokenize(text)) {}

  ModelSpec formula() {
    ModelSpec spec;
    spec.response = expect(Tok::Ident, "response variable").text;
    expect(Tok::Tilde, "'~'");
    spec.fixed_terms = terms(/*stop_before_paren=*/true);
    expect(Tok::Plus, "'+' before random-effects block");
    expect(Tok::LParen, "'('");
    if (peek().kind == Tok::Bar) throw FormulaError("empty random-effects block", peek().offset);
    spec.random_terms = terms(false);
    expect(Tok::Bar, "'|'");
    spec.group = expect(Tok::Ident, "grouping variable").text;
    expect(Tok::RParen, "')'");
    expect(Tok::End, "end of formula");
    return spec;
  }

  std::vector<Term> term_list() {
    auto out = terms(false);
    expect(Tok::End, "end of term list");
    return out;
  }

 private:
  const Token& peek(std::size_t ahead = 0) const {
    return tokens_[std::min(pos_ + ahead, tokens_.size() - 1)];
  }

  const Token& expect(Tok kind, const char* what) {
    const Token& t = peek();
    if (t.kind != kind) {
      throw FormulaError(std::string("expected ") + what +
                             (t.kind == Tok::End ? ", found end of input"
                                                 : ", found '" + t.text + "'"),
                         t.offset);
    }
    ++pos_;
    return t;
  }

  Term term() {
    const Token& t = peek();
    if (t.kind == Tok::One) {
      ++pos_;
      return Term::intercept();
    }
    std::string a = expect(Tok::Ident, "term").text;
    if (peek().kind != Tok::Colon) return Term::variable(std::move(a));
    ++pos_;
    std::string b = expect(Tok::Ident, "variable after ':'").text;
    return Term::interaction(std::move(a), std::move(b));
  }

  std::vector<Term> terms(bool stop_before_paren) {
    std::vector<Term> out;
    while (true) {
      std::size_t offset = peek().offset;
      Term t = term();
      if (std::find(out.begin(), out.end(), t) != out.end()) {
        throw FormulaError("duplicate term '" + t.to_string() + "'", offset);
      }
      out.push_back(std::move(t));
      if (peek().kind != Tok::Plus) break;
      if (stop_before_paren && peek(1).kind == Tok::LParen) break;
      ++pos_;
    }
    return out;
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
};

}  // namespace

ModelSpec parse_formula(std::string_view text) { return Parser(text).formula(); }

std::vector<Term> parse_terms(std::string_view text) { return Parser(text).term_list(); }

// ---------------------------------------------------------------------------
// Designs

namespace {

Eigen::Index column_rank(const Eigen::MatrixXd& m, double rel_tol) {
  if (m.cols() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s(0) <= 0.0) return 0;
  return (s.array() > rel_tol * s(0)).count();
}

void fill_columns(const Dataset& data, const Cluster& cluster, const std::vector<Term>& terms,
                  Eigen::MatrixXd& out) {
  const auto n = static_cast<Eigen::Index>(cluster.rows.size());
  out.resize(n, static_cast<Eigen::Index>(terms.size()));
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const Term& t = terms[k];
    const auto col = static_cast<Eigen::Index>(k);
    if (t.is_intercept()) {
      out.col(col).setOnes();
      continue;
    }
    const auto& a = data.column(t.first);
    const std::vector<double>* b = t.is_interaction() ? &data.column(t.second) : nullptr;
    for (Eigen::Index i = 0; i < n; ++i) {
      std::size_t row = cluster.rows[static_cast<std::size_t>(i)];
      out(i, col) = b ? a[row] * (*b)[row] : a[row];
    }
  }
}

}  // namespace

DesignSet::DesignSet(std::vector<ClusterDesign> clusters) : clusters_(std::move(clusters)) {
  if (clusters_.empty()) throw DataError("a design needs at least one cluster");
  p_ = clusters_.front().X.cols();
  q_ = clusters_.front().Z.cols();
  if (q_ < 1) throw DataError("a design needs at least one random-effect column");
  for (std::size_t j = 0; j < clusters_.size(); ++j) {
    const auto& c = clusters_[j];
    if (c.X.rows() != c.y.size() || c.Z.rows() != c.y.size() || c.y.size() == 0) {
      throw DataError("cluster " + std::to_string(j) + ": inconsistent row counts");
    }
    if (c.X.cols() != p_ || c.Z.cols() != q_) {
      throw DataError("cluster " + std::to_string(j) + ": inconsistent column counts");
    }
    if (column_rank(c.Z, kDesignRankTolerance) < q_) {
      throw DataError("cluster " + std::to_string(j) +
                      ": random-effect design does not have full column rank");
    }
    num_obs_ += static_cast<std::size_t>(c.y.size());
  }
}

DesignSet build_designs(const Dataset& data, const ModelSpec& spec) {
  auto require = [&](const std::string& name) {
    if (!data.has_column(name)) throw DataError("unknown variable '" + name + "'");
  };
  require(spec.response);
  for (const auto* list : {&spec.fixed_terms, &spec.random_terms}) {
    for (const auto& t : *list) {
      if (t.is_intercept()) continue;
      require(t.first);
      if (t.is_interaction()) require(t.second);
    }
  }
  if (spec.random_terms.empty()) throw DataError("model has no random effects");

  const auto& response = data.column(spec.response);
  std::vector<ClusterDesign> clusters;
  clusters.reserve(data.num_clusters());
  for (const Cluster& cluster : data.clusters()) {
    ClusterDesign d;
    fill_columns(data, cluster, spec.fixed_terms, d.X);
    fill_columns(data, cluster, spec.random_terms, d.Z);
    d.y.resize(static_cast<Eigen::Index>(cluster.rows.size()));
    for (std::size_t i = 0; i < cluster.rows.size(); ++i) {
      d.y(static_cast<Eigen::Index>(i)) = response[cluster.rows[i]];
    }
    clusters.push_back(std::move(d));
  }
  return DesignSet(std::move(clusters));
}

}  // namespace mlmbic
