#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "attnmi/errors.hpp"
#include "attnmi/tensor.hpp"

namespace attnmi {

// Named trainable parameters. Ordered map: iteration order matters for
// deterministic initialization and clipping.
using ParamMap = std::map<std::string, TensorPtr>;

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-5;  // plain L2 added to the gradient
};

// Per-parameter first/second moment estimates plus the shared step counter.
struct AdamState {
  AdamConfig config;
  long long step = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  explicit AdamState(AdamConfig cfg = {}) : config(cfg) {}
};

// Scale all gradients so their global L2 norm is at most `max_norm`.
// Returns the pre-clip norm.
inline double clip_grad_norm(ParamMap& params, double max_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params) {
    if (!t->requires_grad || t->grad.empty()) continue;
    for (double gv : t->grad) sq += gv * gv;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (auto& [name, t] : params) {
      if (!t->requires_grad || t->grad.empty()) continue;
      for (double& gv : t->grad) gv *= s;
    }
  }
  return norm;
}

inline void zero_grads(ParamMap& params) {
  for (auto& [name, t] : params) t->zero_grad();
}

// One bias-corrected Adam update over every grad-requiring parameter.
// Weight decay is classic L2: added to the gradient before moment updates.
inline void adam_step(ParamMap& params, AdamState& state) {
  state.step += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params) {
    if (!t->requires_grad) continue;
    t->ensure_grad();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != t->size()) m.assign(t->size(), 0.0);
    if (v.size() != t->size()) v.assign(t->size(), 0.0);
    for (std::size_t i = 0; i < t->size(); ++i) {
      double gi = t->grad[i];
      if (std::isnan(gi) || std::isinf(gi))
        throw TrainError("non-finite gradient in parameter '" + name + "'");
      gi += c.weight_decay * t->values[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      t->values[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

inline ParamMap deep_copy(const ParamMap& params) {
  ParamMap out;
  for (const auto& [name, t] : params) {
    auto copy = std::make_shared<Tensor>(*t);
    out.emplace(name, std::move(copy));
  }
  return out;
}

// Overwrite values of `dst` entries from `src` (shapes must agree).
inline void copy_values(ParamMap& dst, const ParamMap& src) {
  for (auto& [name, t] : dst) {
    auto it = src.find(name);
    if (it == src.end()) throw ConfigError("missing parameter '" + name + "' in source map");
    if (it->second->shape != t->shape)
      throw ConfigError("parameter '" + name + "' shape mismatch: " + shape_str(t->shape) +
                        " vs " + shape_str(it->second->shape));
    t->values = it->second->values;
  }
}

}  // namespace attnmi
