#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mlmbic/bic.hpp"
#include "mlmbic/dataio.hpp"

namespace mlmbic::testing {

// Pupils nested in classes: gender coded -1/+1 within class, teacher experience
// constant per class, random intercept and gender slope.
inline Dataset popular_like(std::uint64_t seed = 3, int classes = 100) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> size(16, 26), exp(2, 25), coin(0, 1);
  std::map<std::string, std::vector<double>> cols{{"popular", {}}, {"gender", {}}, {"texp", {}}};
  std::vector<std::string> ids;
  for (int j = 0; j < classes; ++j) {
    const int n = size(rng);
    const double texp = exp(rng);
    const double b0 = 0.85 * normal(rng), b1 = 0.3 * normal(rng);
    for (int i = 0; i < n; ++i) {
      const double g = i < 2 ? (i == 0 ? -1.0 : 1.0) : (coin(rng) ? 1.0 : -1.0);
      const double y = 3.3 + 0.42 * g + 0.09 * texp + 0.03 * g * texp + b0 + b1 * g +
                       0.95 * normal(rng);
      cols["popular"].push_back(y);
      cols["gender"].push_back(g);
      cols["texp"].push_back(texp);
      ids.push_back("c" + std::to_string(j + 1));
    }
  }
  return Dataset(std::move(cols), std::move(ids));
}

inline std::vector<TermSet> candidate_fixed_sets() {
  return {{"F1", parse_terms("1")},
          {"F2", parse_terms("1 + gender")},
          {"F3", parse_terms("1 + gender + gender:texp")},
          {"F4", parse_terms("1 + texp")},
          {"F5", parse_terms("1 + gender + texp")},
          {"F6", parse_terms("1 + gender + texp + gender:texp")}};
}

inline std::vector<TermSet> candidate_random_sets() {
  return {{"V1", parse_terms("1")}, {"V2", parse_terms("1 + gender")}};
}

// (K1, K2) for the twelve candidates in fixed-major order.
inline const std::vector<std::pair<int, int>>& candidate_counts() {
  static const std::vector<std::pair<int, int>> counts{
      {1, 2}, {1, 4}, {2, 2}, {1, 5}, {3, 2}, {1, 6}, {1, 3}, {1, 5}, {2, 3}, {1, 6}, {3, 3}, {1, 7}};
  return counts;
}

}  // namespace mlmbic::testing
