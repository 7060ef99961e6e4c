#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "attnmi/autodiff.hpp"
#include "attnmi/rng.hpp"
#include "attnmi/tensor.hpp"

namespace attnmi::testing {

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

inline TensorPtr random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  auto t = make_tensor(std::move(shape));
  for (auto& v : t->values) v = rng.uniform(lo, hi);
  t->requires_grad = true;
  return t;
}

// Loss builder: assembles a fresh graph over the given leaf tensors and
// returns a scalar. Used both for the analytic backward pass and for the
// central finite differences.
using LossBuilder = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

// Compare analytic gradients of `build` w.r.t. every entry of every input
// against central finite differences (f(x+h) - f(x-h)) / 2h.
inline GradCheckResult check_gradients(const std::vector<TensorPtr>& inputs,
                                       const LossBuilder& build, double h = 1e-4) {
  for (const auto& t : inputs) t->zero_grad();
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
  }
  GradCheckResult res;
  for (const auto& t : inputs) {
    t->ensure_grad();
    for (std::size_t i = 0; i < t->size(); ++i) {
      const double keep = t->values[i];
      t->values[i] = keep + h;
      double up;
      {
        Graph g;
        up = build(g).scalar();
      }
      t->values[i] = keep - h;
      double down;
      {
        Graph g;
        down = build(g).scalar();
      }
      t->values[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = t->grad[i];
      if (fd == 0.0 && an == 0.0) {
        res.checked += 1;
        continue;
      }
      res.max_rel_err = std::max(res.max_rel_err, rel_err(an, fd, 1e-6));
      res.checked += 1;
    }
  }
  return res;
}

}  // namespace attnmi::testing
