#pragma once

#include <span>
#include <string>

#include "attnmi/errors.hpp"

namespace attnmi {

// Weighted Kendall correlation between a value vector m and the attention
// means that double as pair weights:
//
//   tau = sum_{i<j} (a_i + a_j) * sign(m_i - m_j) * sign(a_i - a_j)
//         ---------------------------------------------------------
//                      sum_{i<j} (a_i + a_j)
//
// Ties contribute zero to the numerator, so mismatches among heavily
// attended ranks cost more than mismatches in the tail.
inline double weighted_kendall(std::span<const double> m, std::span<const double> a_bar) {
  if (m.size() != a_bar.size())
    throw InvalidInputError("weighted_kendall: length mismatch " + std::to_string(m.size()) +
                            " vs " + std::to_string(a_bar.size()));
  if (m.size() < 2) throw AnalysisError("weighted_kendall needs k >= 2");
  for (double a : a_bar)
    if (a < 0.0) throw InvalidInputError("weighted_kendall: negative weight");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i + 1 < m.size(); ++i) {
    for (std::size_t j = i + 1; j < m.size(); ++j) {
      const double w = a_bar[i] + a_bar[j];
      den += w;
      const double dm = m[i] - m[j];
      const double da = a_bar[i] - a_bar[j];
      if (dm == 0.0 || da == 0.0) continue;
      const double concordant = (dm > 0.0) == (da > 0.0) ? 1.0 : -1.0;
      num += w * concordant;
    }
  }
  return den == 0.0 ? 0.0 : num / den;
}

}  // namespace attnmi
