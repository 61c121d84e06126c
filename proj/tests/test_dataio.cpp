#include <doctest.h>

#include <random>
#include <sstream>

#include "mlmbic/dataio.hpp"

using namespace mlmbic;

namespace {

Dataset read_csv(const std::string& text, const std::string& group = "g") {
  std::istringstream in(text);
  return read_table(in, TableFormat::Csv, group);
}

}  // namespace

TEST_CASE("four-row csv forms two clusters") {
  Dataset d = read_csv("y,x,g\n1,0.5,1\n2,1.5,1\n3,2.5,2\n4,3.5,2\n");
  CHECK(d.num_rows() == 4);
  CHECK(d.num_clusters() == 2);
  CHECK(d.clusters()[0].rows.size() == 2);
  CHECK(d.clusters()[1].rows.size() == 2);
  CHECK(d.mean_cluster_size() == doctest::Approx(2.0));
  CHECK(d.column("x")[3] == doctest::Approx(3.5));
}

TEST_CASE("whitespace tables and unsorted groups keep first-appearance order") {
  std::istringstream in("y  x   class\n1 2 b\n3 4 a\n5 6 b\n7 8 a\n");
  Dataset d = read_table(in, TableFormat::Whitespace, "class");
  REQUIRE(d.num_clusters() == 2);
  CHECK(d.clusters()[0].label == "b");
  CHECK(d.clusters()[0].rows == std::vector<std::size_t>{0, 2});
  CHECK(d.clusters()[1].rows == std::vector<std::size_t>{1, 3});
}

TEST_CASE("table errors") {
  CHECK_THROWS_AS(read_csv("y,g\n1,1\n2,1\n"), DataError);            // one cluster
  CHECK_THROWS_AS(read_csv("y,g\n1,1\nabc,2\n"), DataError);          // non-numeric
  CHECK_THROWS_AS(read_csv("y,x\n1,1\n2,2\n"), DataError);            // missing group column
  CHECK_THROWS_AS(read_csv("y,x,g\n1,1\n2,2,2\n"), DataError);        // ragged row
  CHECK_THROWS_AS(load_table("/nonexistent/file.csv", TableFormat::Csv, "g"), DataError);
  CHECK_THROWS_AS(parse_table_format("tsv"), DataError);
}

TEST_CASE("parse_formula on the interaction model") {
  ModelSpec s = parse_formula("popular ~ 1 + gender + texp + gender:texp + (1 + gender | class)");
  CHECK(s.response == "popular");
  CHECK(s.p() == 4);
  CHECK(s.q() == 2);
  CHECK(s.group == "class");
  CHECK(s.fixed_terms[0].is_intercept());
  CHECK(s.fixed_terms[3].is_interaction());
  CHECK(s.fixed_terms[3] == Term::interaction("texp", "gender"));
}

TEST_CASE("parse_formula minimal and errors") {
  ModelSpec s = parse_formula("y ~ 1 + (1 | g)");
  CHECK(s.p() == 1);
  CHECK(s.q() == 1);

  CHECK_THROWS_AS(parse_formula("y ~ 1 + (| g)"), FormulaError);
  CHECK_THROWS_AS(parse_formula("y ~ (1 | g)"), FormulaError);
  CHECK_THROWS_AS(parse_formula("y ~ 1 + x + x + (1 | g)"), FormulaError);
  CHECK_THROWS_AS(parse_formula("y ~ 1 + 2 + (1 | g)"), FormulaError);
  CHECK_THROWS_AS(parse_formula("y ~ 1 + x + (1 | g) extra"), FormulaError);
  try {
    parse_formula("y ~ 1 + (| g)");
  } catch (const FormulaError& e) {
    CHECK(e.offset() == 9);
  }
}

TEST_CASE("formula round trip") {
  const char* texts[] = {
      "y ~ 1 + (1 | g)",
      "popular ~ 1 + gender + texp + gender:texp + (1 + gender | class)",
      "  r~x+  a:b +(x|grp)",
      "y ~ 1 + x.1 + (1 + x.1 | g_2)",
  };
  for (const char* t : texts) {
    ModelSpec s = parse_formula(t);
    CHECK(parse_formula(s.to_string()) == s);
  }

  // Random formulas assembled from a small vocabulary.
  std::mt19937 rng(11);
  const std::vector<std::string> vars{"a", "b", "c", "d"};
  for (int trial = 0; trial < 50; ++trial) {
    ModelSpec s;
    s.response = "y";
    s.group = "g";
    std::vector<Term> pool{Term::intercept()};
    for (const auto& v : vars) pool.push_back(Term::variable(v));
    pool.push_back(Term::interaction("a", "b"));
    pool.push_back(Term::interaction("c", "d"));
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t nf = 1 + rng() % pool.size();
    s.fixed_terms.assign(pool.begin(), pool.begin() + static_cast<long>(nf));
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t nr = 1 + rng() % 3;
    s.random_terms.assign(pool.begin(), pool.begin() + static_cast<long>(nr));
    CHECK(parse_formula(s.to_string()) == s);
  }
}

TEST_CASE("build_designs columns") {
  Dataset d = read_csv("popular,gender,texp,class\n3,-1,5,1\n4,1,5,1\n5,1,7,2\n6,-1,7,2\n",
                       "class");
  ModelSpec s = parse_formula("popular ~ 1 + gender + texp + gender:texp + (1 | class)");
  DesignSet ds = build_designs(d, s);
  REQUIRE(ds.num_clusters() == 2);
  Eigen::MatrixXd expected(2, 4);
  expected << 1, -1, 5, -5, 1, 1, 5, 5;
  CHECK((ds[0].X - expected).cwiseAbs().maxCoeff() == 0.0);
  CHECK(ds[0].Z.cols() == 1);
  CHECK(ds[0].Z.isOnes());
  CHECK(ds.num_obs() == 4);
  CHECK(ds.p() == 4);
  CHECK(ds.q() == 1);

  CHECK_THROWS_AS(build_designs(d, parse_formula("popular ~ 1 + age + (1 | class)")), DataError);
}

TEST_CASE("build_designs rejects rank-deficient Z") {
  // gender is constant within cluster 2, so (1, gender) is rank 1 there.
  Dataset d = read_csv("y,gender,g\n1,-1,1\n2,1,1\n3,1,2\n4,1,2\n");
  CHECK_THROWS_AS(build_designs(d, parse_formula("y ~ 1 + (1 + gender | g)")), DataError);
}

TEST_CASE("stacked responses reproduce the column within clusters") {
  Dataset d = read_csv("y,t,g\n1,0,a\n2,0,b\n3,1,a\n4,1,c\n5,2,b\n6,2,c\n");
  DesignSet ds = build_designs(d, parse_formula("y ~ 1 + t + (1 | g)"));
  const auto& y = d.column("y");
  for (std::size_t j = 0; j < ds.num_clusters(); ++j) {
    const auto& rows = d.clusters()[j].rows;
    for (std::size_t i = 0; i < rows.size(); ++i)
      CHECK(ds[j].y(static_cast<Eigen::Index>(i)) == y[rows[i]]);
  }
}

TEST_CASE("between-cluster covariate is constant within each cluster") {
  Dataset d = read_csv("y,w,b,g\n1,0.1,3,1\n2,0.7,3,1\n3,0.2,8,2\n4,0.9,8,2\n5,0.4,8,2\n");
  DesignSet ds = build_designs(d, parse_formula("y ~ 1 + w + b + (1 | g)"));
  for (const auto& c : ds.clusters()) {
    auto col = c.X.col(2);
    CHECK(col.maxCoeff() == col.minCoeff());
  }
}
