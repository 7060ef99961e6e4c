#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "attnmi/errors.hpp"
#include "attnmi/rng.hpp"

namespace attnmi {

// Plug-in mutual information in bits from empirical joint frequencies of two
// discrete label sequences. 0 * log 0 = 0.
inline double mutual_information_bits(std::span<const std::size_t> xs,
                                      std::span<const std::size_t> ys) {
  if (xs.size() != ys.size()) throw InvalidInputError("mutual information: length mismatch");
  if (xs.empty()) throw InvalidInputError("mutual information: empty input");
  // Compress arbitrary ids to dense indices.
  std::map<std::size_t, std::size_t> xid, yid;
  for (std::size_t v : xs) xid.emplace(v, xid.size());
  for (std::size_t v : ys) yid.emplace(v, yid.size());
  const std::size_t nx = xid.size(), ny = yid.size();
  std::vector<double> joint(nx * ny, 0.0), px(nx, 0.0), py(ny, 0.0);
  const double inv_n = 1.0 / static_cast<double>(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const std::size_t a = xid[xs[i]], b = yid[ys[i]];
    joint[a * ny + b] += inv_n;
    px[a] += inv_n;
    py[b] += inv_n;
  }
  double mi = 0.0;
  for (std::size_t a = 0; a < nx; ++a)
    for (std::size_t b = 0; b < ny; ++b) {
      const double p = joint[a * ny + b];
      if (p > 0.0) mi += p * std::log2(p / (px[a] * py[b]));
    }
  return mi < 0.0 ? 0.0 : mi;
}

struct PermutationBaseline {
  double mean = 0.0;
  double sd = 0.0;
  // Smoothed upper-tail p-value of the observed MI under label shuffling.
  double p_value = 1.0;
};

// Shuffle ys `permutations` times and summarize the null MI distribution.
// Exposes the small-sample bias of the plug-in estimator.
inline PermutationBaseline mi_permutation_baseline(std::span<const std::size_t> xs,
                                                   std::span<const std::size_t> ys,
                                                   double observed, std::size_t permutations,
                                                   std::uint64_t seed) {
  std::vector<std::size_t> shuffled(ys.begin(), ys.end());
  Rng rng(Rng::splitmix(seed + 0x9e77));
  double sum = 0.0, sum_sq = 0.0;
  std::size_t at_least = 0;
  for (std::size_t p = 0; p < permutations; ++p) {
    rng.shuffle(shuffled);
    const double mi = mutual_information_bits(xs, shuffled);
    sum += mi;
    sum_sq += mi * mi;
    if (mi >= observed) ++at_least;
  }
  PermutationBaseline out;
  if (permutations > 0) {
    out.mean = sum / static_cast<double>(permutations);
    const double var = sum_sq / static_cast<double>(permutations) - out.mean * out.mean;
    out.sd = var > 0.0 ? std::sqrt(var) : 0.0;
    out.p_value = (1.0 + static_cast<double>(at_least)) / (1.0 + static_cast<double>(permutations));
  }
  return out;
}

}  // namespace attnmi
