#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "attnmi/errors.hpp"
#include "attnmi/rng.hpp"

namespace attnmi {

struct KMeansOptions {
  std::size_t restarts = 10;
  std::size_t max_iterations = 100;
};

struct KMeansResult {
  std::size_t n_clusters = 0;
  std::vector<double> centroids;          // n_clusters x dim
  std::vector<std::size_t> assignment;    // one cluster id per input vector
  std::vector<std::size_t> cluster_sizes;
  double objective = 0.0;                 // within-cluster sum of squares
  std::vector<double> objective_history;  // per iteration, winning restart

  std::size_t min_cluster_size() const {
    std::size_t m = std::numeric_limits<std::size_t>::max();
    for (std::size_t s : cluster_sizes) m = std::min(m, s);
    return cluster_sizes.empty() ? 0 : m;
  }
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline KMeansResult kmeans_once(std::span<const double> data, std::size_t n, std::size_t dim,
                                std::size_t k, Rng& rng, std::size_t max_iterations) {
  KMeansResult res;
  res.n_clusters = k;
  res.centroids.assign(k * dim, 0.0);

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  const auto first = static_cast<std::size_t>(rng.index(n));
  std::copy_n(data.data() + first * dim, dim, res.centroids.begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = sq_dist(data.data() + i * dim, res.centroids.data() + (c - 1) * dim, dim);
      d2[i] = std::min(d2[i], d);
      total += d2[i];
    }
    std::size_t chosen = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        r -= d2[i];
        if (r <= 0.0) {
          chosen = i;
          break;
        }
        chosen = i;
      }
    } else {
      chosen = static_cast<std::size_t>(rng.index(n));
    }
    std::copy_n(data.data() + chosen * dim, dim, res.centroids.begin() + c * dim);
  }

  res.assignment.assign(n, 0);
  std::vector<std::size_t> prev(n, std::numeric_limits<std::size_t>::max());
  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    // Assignment step; ties go to the lowest cluster id.
    double objective = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t c = 0; c < k; ++c) {
        const double d = sq_dist(data.data() + i * dim, res.centroids.data() + c * dim, dim);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      res.assignment[i] = arg;
      objective += best;
    }
    res.objective_history.push_back(objective);
    if (res.assignment == prev) break;
    prev = res.assignment;

    // Update step.
    res.cluster_sizes.assign(k, 0);
    std::fill(res.centroids.begin(), res.centroids.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignment[i];
      res.cluster_sizes[c] += 1;
      for (std::size_t j = 0; j < dim; ++j) res.centroids[c * dim + j] += data[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (res.cluster_sizes[c] == 0) {
        // Reseed an empty cluster at the point farthest from its centroid.
        double worst = -1.0;
        std::size_t far = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ci = res.assignment[i];
          const double d = sq_dist(data.data() + i * dim, res.centroids.data() + ci * dim, dim)
                           / std::max<std::size_t>(1, res.cluster_sizes[ci]);
          if (d > worst) {
            worst = d;
            far = i;
          }
        }
        std::copy_n(data.data() + far * dim, dim, res.centroids.begin() + c * dim);
        res.cluster_sizes[c] = 1;  // provisional; fixed on the next assignment
        continue;
      }
      for (std::size_t j = 0; j < dim; ++j)
        res.centroids[c * dim + j] /= static_cast<double>(res.cluster_sizes[c]);
    }
  }

  // Final bookkeeping from the last assignment.
  res.cluster_sizes.assign(k, 0);
  for (std::size_t c : res.assignment) res.cluster_sizes[c] += 1;
  res.objective = res.objective_history.empty() ? 0.0 : res.objective_history.back();
  return res;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding and restarts; returns the restart
// with the lowest within-cluster sum of squares. Deterministic given seed.
inline KMeansResult kmeans(std::span<const double> data, std::size_t n, std::size_t dim,
                           std::size_t k, std::uint64_t seed, KMeansOptions opts = {}) {
  if (n == 0 || dim == 0) throw AnalysisError("kmeans: empty input");
  if (data.size() != n * dim) throw AnalysisError("kmeans: data size does not match n*dim");
  if (k == 0 || k > n) throw AnalysisError("kmeans: need 1 <= k <= n");
  KMeansResult best;
  bool have = false;
  for (std::size_t r = 0; r < opts.restarts; ++r) {
    Rng rng(Rng::splitmix(seed + 0x9000 + r));
    KMeansResult cur = detail::kmeans_once(data, n, dim, k, rng, opts.max_iterations);
    if (!have || cur.objective < best.objective) {
      best = std::move(cur);
      have = true;
    }
  }
  return best;
}

struct QuantizerConfig {
  std::size_t representation_start = 50;
  std::size_t representation_cap = 200;
  std::size_t decrement = 5;
  std::size_t logit_clusters = 5;
  // Slack-driven growth toward the cap; off by default.
  bool allow_growth = false;
  std::size_t growth_min_size = 10;
  std::size_t growth_step = 25;
  KMeansOptions kmeans;
};

enum class QuantizeTarget { Representation, Logit };

// Quantize vectors for the discrete MI estimate. The cluster count is chosen
// so every centroid keeps at least two samples: representations start at 50
// and step down by 5; binary-task logits start at 5. Identical inputs
// degrade to a single cluster.
inline KMeansResult fit_quantizer(std::span<const double> data, std::size_t n, std::size_t dim,
                                  QuantizeTarget target, std::uint64_t seed,
                                  QuantizerConfig cfg = {}) {
  if (n < 4) throw AnalysisError("quantizer needs at least 4 vectors, got " + std::to_string(n));
  std::size_t start = target == QuantizeTarget::Logit ? cfg.logit_clusters
                                                      : cfg.representation_start;
  start = std::min(start, n / 2);
  start = std::max<std::size_t>(start, 1);

  std::size_t k = start;
  KMeansResult res;
  while (true) {
    res = kmeans(data, n, dim, k, seed, cfg.kmeans);
    if (res.min_cluster_size() >= 2 || k == 1) break;
    if (k <= 2) {
      k = 1;  // degenerate data: everything in one cluster
      continue;
    }
    k = k > cfg.decrement ? k - cfg.decrement : 2;
  }

  if (target == QuantizeTarget::Representation && cfg.allow_growth) {
    while (res.n_clusters < cfg.representation_cap &&
           res.min_cluster_size() >= cfg.growth_min_size) {
      const std::size_t next =
          std::min(cfg.representation_cap, std::min(n / 2, res.n_clusters + cfg.growth_step));
      if (next <= res.n_clusters) break;
      KMeansResult grown = kmeans(data, n, dim, next, seed, cfg.kmeans);
      if (grown.min_cluster_size() < 2) break;
      res = std::move(grown);
    }
  }
  return res;
}

}  // namespace attnmi
