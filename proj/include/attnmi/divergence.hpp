#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>

#include "attnmi/errors.hpp"

namespace attnmi {

namespace detail {
inline void check_prob_vector(std::span<const double> p, const char* who) {
  double s = 0.0;
  for (double v : p) {
    if (v < 0.0) throw InvalidInputError(std::string(who) + ": negative probability");
    s += v;
  }
  if (std::fabs(s - 1.0) > 1e-6)
    throw InvalidInputError(std::string(who) + ": probabilities sum to " + std::to_string(s));
}
}  // namespace detail

// Total variation distance, 0.5 * sum |p_i - q_i|, in [0, 1].
inline double tvd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidInputError("tvd: length mismatch");
  detail::check_prob_vector(p, "tvd");
  detail::check_prob_vector(q, "tvd");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::fabs(p[i] - q[i]);
  return 0.5 * s;
}

// KL(p || q) in nats, with 0*log 0 = 0. When q_i = 0 < p_i the divergence is
// infinite; that is reported as an infinity sentinel plus the flag.
inline double kl(std::span<const double> p, std::span<const double> q,
                 bool* infinite = nullptr) {
  if (p.size() != q.size()) throw InvalidInputError("kl: length mismatch");
  detail::check_prob_vector(p, "kl");
  detail::check_prob_vector(q, "kl");
  if (infinite) *infinite = false;
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) {
      if (infinite) *infinite = true;
      return std::numeric_limits<double>::infinity();
    }
    s += p[i] * std::log(p[i] / q[i]);
  }
  return s < 0.0 ? 0.0 : s;  // clamp tiny negative round-off
}

// Jensen-Shannon divergence in nats; always finite, bounded by log 2.
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidInputError("jsd: length mismatch");
  detail::check_prob_vector(p, "jsd");
  detail::check_prob_vector(q, "jsd");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0.0) s += 0.5 * p[i] * std::log(p[i] / m);
    if (q[i] > 0.0) s += 0.5 * q[i] * std::log(q[i] / m);
  }
  return s < 0.0 ? 0.0 : s;
}

}  // namespace attnmi
