#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "attnmi/errors.hpp"
#include "attnmi/tensor.hpp"

namespace attnmi {

// Reverse-mode engine. Operations execute eagerly and append a backward
// closure to the tape; since every node's inputs exist before the node is
// recorded, tape order is a topological order and the backward pass replays
// it once, in reverse.
//
// Gradients of a pass are accumulated in a pass-local workspace and only
// added into Tensor::grad at the end. Running backward twice on the same
// graph therefore yields exactly twice the single-pass gradient.

class Graph;

struct Var {
  TensorPtr t;
  int id = -1;

  bool defined() const { return t != nullptr; }
  const Shape& shape() const { return t->shape; }
  std::size_t size() const { return t->size(); }
  double scalar() const {
    if (!t->is_scalar()) throw ConfigError("expected scalar, got " + shape_str(t->shape));
    return t->values[0];
  }
};

class Graph {
 public:
  using GradWs = std::vector<std::vector<double>>;

  // Wrap an existing tensor (typically a trainable parameter). The same
  // tensor always maps to the same node within one graph.
  Var var(const TensorPtr& t) {
    auto it = ids_.find(t.get());
    if (it != ids_.end()) return Var{t, it->second};
    return register_tensor(t);
  }

  // A fresh non-differentiable tensor owned by this graph.
  Var constant(Tensor v) {
    auto t = std::make_shared<Tensor>(std::move(v));
    t->requires_grad = false;
    return register_tensor(t);
  }

  Var constant_scalar(double v) { return constant(Tensor({1}, {v})); }

  Var fresh(Shape shape, bool requires_grad) {
    auto t = make_tensor(std::move(shape));
    t->requires_grad = requires_grad;
    return register_tensor(t);
  }

  void record(std::function<void(GradWs&)> fn) { tape_.push_back(std::move(fn)); }

  std::size_t num_nodes() const { return slots_.size(); }
  std::size_t num_ops() const { return tape_.size(); }

  // Seed d(loss)/d(loss) = 1 and replay the tape in reverse. Accumulates
  // into Tensor::grad of every grad-requiring node.
  void backward(const Var& loss) {
    if (!loss.defined() || !loss.t->is_scalar())
      throw ConfigError("backward requires a scalar loss node");
    GradWs ws(slots_.size());
    ws[static_cast<std::size_t>(loss.id)].assign(1, 1.0);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)(ws);
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      Tensor* t = slots_[i].get();
      if (!t->requires_grad || ws[i].empty()) continue;
      t->ensure_grad();
      for (std::size_t j = 0; j < ws[i].size(); ++j) t->grad[j] += ws[i][j];
    }
  }

  static std::vector<double>& slot(GradWs& ws, int id, std::size_t n) {
    auto& v = ws[static_cast<std::size_t>(id)];
    if (v.empty()) v.assign(n, 0.0);
    return v;
  }

  // Incoming gradient of a node, or nullptr if nothing flowed into it.
  static const std::vector<double>* incoming(GradWs& ws, int id) {
    const auto& v = ws[static_cast<std::size_t>(id)];
    return v.empty() ? nullptr : &v;
  }

 private:
  Var register_tensor(const TensorPtr& t) {
    const int id = static_cast<int>(slots_.size());
    slots_.push_back(t);
    ids_.emplace(t.get(), id);
    return Var{t, id};
  }

  std::vector<TensorPtr> slots_;
  std::unordered_map<const Tensor*, int> ids_;
  std::vector<std::function<void(GradWs&)>> tape_;
};

namespace detail {

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.t->shape != b.t->shape)
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.t->shape) + " vs " +
                      shape_str(b.t->shape));
}

enum class BinKind { Add, Sub, Mul };

// Equal-shape or scalar-vs-tensor broadcasting only.
inline Var binary(Graph& g, BinKind kind, const Var& a, const Var& b, const char* name) {
  const bool a_scalar = a.t->is_scalar();
  const bool b_scalar = b.t->is_scalar();
  if (!a_scalar && !b_scalar) check_same_shape(a, b, name);
  const Shape& out_shape = a_scalar ? b.t->shape : a.t->shape;
  const std::size_t n = numel(out_shape);
  Var out = g.fresh(out_shape, a.t->requires_grad || b.t->requires_grad);
  const auto& av = a.t->values;
  const auto& bv = b.t->values;
  auto& ov = out.t->values;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[a_scalar ? 0 : i];
    const double y = bv[b_scalar ? 0 : i];
    switch (kind) {
      case BinKind::Add: ov[i] = x + y; break;
      case BinKind::Sub: ov[i] = x - y; break;
      case BinKind::Mul: ov[i] = x * y; break;
    }
  }
  if (!out.t->requires_grad) return out;
  g.record([kind, a, b, out, a_scalar, b_scalar, n](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    if (a.t->requires_grad) {
      auto& ga = Graph::slot(ws, a.id, a.t->size());
      for (std::size_t i = 0; i < n; ++i) {
        double d = (*go)[i];
        if (kind == BinKind::Mul) d *= b.t->values[b_scalar ? 0 : i];
        ga[a_scalar ? 0 : i] += d;
      }
    }
    if (b.t->requires_grad) {
      auto& gb = Graph::slot(ws, b.id, b.t->size());
      for (std::size_t i = 0; i < n; ++i) {
        double d = (*go)[i];
        if (kind == BinKind::Sub) d = -d;
        if (kind == BinKind::Mul) d = (*go)[i] * a.t->values[a_scalar ? 0 : i];
        gb[b_scalar ? 0 : i] += d;
      }
    }
  });
  return out;
}

// Unary op with pointwise derivative expressed from (x, y).
template <typename F, typename DF>
inline Var unary(Graph& g, const Var& a, F f, DF df) {
  Var out = g.fresh(a.t->shape, a.t->requires_grad);
  const std::size_t n = a.t->size();
  for (std::size_t i = 0; i < n; ++i) out.t->values[i] = f(a.t->values[i]);
  if (!out.t->requires_grad) return out;
  g.record([a, out, df, n](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& ga = Graph::slot(ws, a.id, n);
    for (std::size_t i = 0; i < n; ++i) ga[i] += (*go)[i] * df(a.t->values[i], out.t->values[i]);
  });
  return out;
}

}  // namespace detail

inline Var add(Graph& g, const Var& a, const Var& b) {
  return detail::binary(g, detail::BinKind::Add, a, b, "add");
}
inline Var sub(Graph& g, const Var& a, const Var& b) {
  return detail::binary(g, detail::BinKind::Sub, a, b, "sub");
}
inline Var mul(Graph& g, const Var& a, const Var& b) {
  return detail::binary(g, detail::BinKind::Mul, a, b, "mul");
}

inline Var scale(Graph& g, const Var& a, double c) {
  return detail::unary(
      g, a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var neg(Graph& g, const Var& a) { return scale(g, a, -1.0); }

inline Var tanh_op(Graph& g, const Var& a) {
  return detail::unary(
      g, a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Graph& g, const Var& a) {
  return detail::unary(
      g, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Graph& g, const Var& a) {
  return detail::unary(
      g, a,
      [](double x) {
        // Stable in both tails.
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var exp_op(Graph& g, const Var& a) {
  return detail::unary(
      g, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log_op(Graph& g, const Var& a) {
  return detail::unary(
      g, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var abs_op(Graph& g, const Var& a) {
  return detail::unary(
      g, a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

// C[m x n] = A[m x k] * B[k x n]
inline Var matmul(Graph& g, const Var& a, const Var& b) {
  if (a.t->shape.size() != 2 || b.t->shape.size() != 2 || a.t->shape[1] != b.t->shape[0])
    throw ConfigError("matmul: incompatible shapes " + shape_str(a.t->shape) + " vs " +
                      shape_str(b.t->shape));
  const std::size_t m = a.t->shape[0], k = a.t->shape[1], n = b.t->shape[1];
  Var out = g.fresh({m, n}, a.t->requires_grad || b.t->requires_grad);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.t->values[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out.t->values[i * n + j] += av * b.t->values[p * n + j];
    }
  if (!out.t->requires_grad) return out;
  g.record([a, b, out, m, k, n](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    if (a.t->requires_grad) {
      auto& ga = Graph::slot(ws, a.id, m * k);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double d = (*go)[i * n + j];
          if (d == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += d * b.t->values[p * n + j];
        }
    }
    if (b.t->requires_grad) {
      auto& gb = Graph::slot(ws, b.id, k * n);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = a.t->values[i * k + p];
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * (*go)[i * n + j];
        }
    }
  });
  return out;
}

// y[m] = A[m x k] * x[k]
inline Var matvec(Graph& g, const Var& a, const Var& x) {
  if (a.t->shape.size() != 2 || x.t->shape.size() != 1 || a.t->shape[1] != x.t->shape[0])
    throw ConfigError("matvec: incompatible shapes " + shape_str(a.t->shape) + " vs " +
                      shape_str(x.t->shape));
  const std::size_t m = a.t->shape[0], k = a.t->shape[1];
  Var out = g.fresh({m}, a.t->requires_grad || x.t->requires_grad);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += a.t->values[i * k + p] * x.t->values[p];
    out.t->values[i] = acc;
  }
  if (!out.t->requires_grad) return out;
  g.record([a, x, out, m, k](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    if (a.t->requires_grad) {
      auto& ga = Graph::slot(ws, a.id, m * k);
      for (std::size_t i = 0; i < m; ++i) {
        const double d = (*go)[i];
        if (d == 0.0) continue;
        for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += d * x.t->values[p];
      }
    }
    if (x.t->requires_grad) {
      auto& gx = Graph::slot(ws, x.id, k);
      for (std::size_t i = 0; i < m; ++i) {
        const double d = (*go)[i];
        if (d == 0.0) continue;
        for (std::size_t p = 0; p < k; ++p) gx[p] += d * a.t->values[i * k + p];
      }
    }
  });
  return out;
}

// y[k] = x[m] * A[m x k]
inline Var vecmat(Graph& g, const Var& x, const Var& a) {
  if (a.t->shape.size() != 2 || x.t->shape.size() != 1 || a.t->shape[0] != x.t->shape[0])
    throw ConfigError("vecmat: incompatible shapes " + shape_str(x.t->shape) + " vs " +
                      shape_str(a.t->shape));
  const std::size_t m = a.t->shape[0], k = a.t->shape[1];
  Var out = g.fresh({k}, a.t->requires_grad || x.t->requires_grad);
  for (std::size_t i = 0; i < m; ++i) {
    const double xv = x.t->values[i];
    if (xv == 0.0) continue;
    for (std::size_t p = 0; p < k; ++p) out.t->values[p] += xv * a.t->values[i * k + p];
  }
  if (!out.t->requires_grad) return out;
  g.record([a, x, out, m, k](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    if (x.t->requires_grad) {
      auto& gx = Graph::slot(ws, x.id, m);
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += (*go)[p] * a.t->values[i * k + p];
        gx[i] += acc;
      }
    }
    if (a.t->requires_grad) {
      auto& ga = Graph::slot(ws, a.id, m * k);
      for (std::size_t i = 0; i < m; ++i) {
        const double xv = x.t->values[i];
        if (xv == 0.0) continue;
        for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += xv * (*go)[p];
      }
    }
  });
  return out;
}

// Gather rows of a table: embedding lookup. Gradient scatters back to the
// looked-up rows only.
inline Var rows(Graph& g, const Var& table, const std::vector<std::size_t>& idx) {
  if (table.t->shape.size() != 2)
    throw ConfigError("rows: table must be 2-D, got " + shape_str(table.t->shape));
  const std::size_t v = table.t->shape[0], d = table.t->shape[1];
  for (std::size_t i : idx)
    if (i >= v)
      throw InvalidInputError("row index " + std::to_string(i) + " out of range (table has " +
                              std::to_string(v) + " rows)");
  Var out = g.fresh({idx.size(), d}, table.t->requires_grad);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(table.t->values.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d,
                out.t->values.begin() + static_cast<std::ptrdiff_t>(r * d));
  if (!out.t->requires_grad) return out;
  g.record([table, out, idx, d, v](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& gt = Graph::slot(ws, table.id, v * d);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) gt[idx[r] * d + c] += (*go)[r * d + c];
  });
  return out;
}

// Contiguous row slice of a 2-D tensor.
inline Var row_block(Graph& g, const Var& a, std::size_t r0, std::size_t nrows) {
  if (a.t->shape.size() != 2 || r0 + nrows > a.t->shape[0])
    throw ConfigError("row_block: rows [" + std::to_string(r0) + "," +
                      std::to_string(r0 + nrows) + ") out of range for " + shape_str(a.t->shape));
  const std::size_t c = a.t->shape[1];
  Var out = g.fresh({nrows, c}, a.t->requires_grad);
  std::copy_n(a.t->values.begin() + static_cast<std::ptrdiff_t>(r0 * c), nrows * c,
              out.t->values.begin());
  if (!out.t->requires_grad) return out;
  g.record([a, out, r0, nrows, c](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& ga = Graph::slot(ws, a.id, a.t->size());
    for (std::size_t i = 0; i < nrows * c; ++i) ga[r0 * c + i] += (*go)[i];
  });
  return out;
}

// Single row of a 2-D tensor as a 1-D vector.
inline Var row(Graph& g, const Var& a, std::size_t r) {
  Var blk = row_block(g, a, r, 1);
  blk.t->shape = {a.t->shape[1]};
  return blk;
}

// 1-D slice.
inline Var slice(Graph& g, const Var& a, std::size_t start, std::size_t len) {
  if (a.t->shape.size() != 1 || start + len > a.t->shape[0])
    throw ConfigError("slice: [" + std::to_string(start) + "," + std::to_string(start + len) +
                      ") out of range for " + shape_str(a.t->shape));
  Var out = g.fresh({len}, a.t->requires_grad);
  std::copy_n(a.t->values.begin() + static_cast<std::ptrdiff_t>(start), len,
              out.t->values.begin());
  if (!out.t->requires_grad) return out;
  g.record([a, out, start, len](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& ga = Graph::slot(ws, a.id, a.t->size());
    for (std::size_t i = 0; i < len; ++i) ga[start + i] += (*go)[i];
  });
  return out;
}

inline Var pick(Graph& g, const Var& a, std::size_t i) {
  Var s = slice(g, a, i, 1);
  return s;
}

inline Var concat(Graph& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.t->shape.size() != 1) throw ConfigError("concat: inputs must be 1-D");
    total += p.t->shape[0];
    rg = rg || p.t->requires_grad;
  }
  Var out = g.fresh({total}, rg);
  std::size_t off = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(off);
    std::copy(p.t->values.begin(), p.t->values.end(),
              out.t->values.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.t->shape[0];
  }
  if (!rg) return out;
  g.record([parts, out, offsets](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (!parts[p].t->requires_grad) continue;
      auto& gp = Graph::slot(ws, parts[p].id, parts[p].t->size());
      for (std::size_t i = 0; i < parts[p].t->size(); ++i) gp[i] += (*go)[offsets[p] + i];
    }
  });
  return out;
}

// Column-wise concatenation of 2-D tensors sharing a row count.
inline Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  const std::size_t m = parts[0].t->shape[0];
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.t->shape.size() != 2 || p.t->shape[0] != m)
      throw ConfigError("concat_cols: row count mismatch");
    total += p.t->shape[1];
    rg = rg || p.t->requires_grad;
  }
  Var out = g.fresh({m, total}, rg);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t c = p.t->shape[1];
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(p.t->values.begin() + static_cast<std::ptrdiff_t>(r * c), c,
                  out.t->values.begin() + static_cast<std::ptrdiff_t>(r * total + off));
    off += c;
  }
  if (!rg) return out;
  g.record([parts, out, offsets, m, total](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (!parts[p].t->requires_grad) continue;
      const std::size_t c = parts[p].t->shape[1];
      auto& gp = Graph::slot(ws, parts[p].id, parts[p].t->size());
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += (*go)[r * total + offsets[p] + j];
    }
  });
  return out;
}

// Stack equal-length 1-D vectors into a 2-D tensor, one per row.
inline Var stack_rows(Graph& g, const std::vector<Var>& rows_in) {
  if (rows_in.empty()) throw ConfigError("stack_rows: no inputs");
  const std::size_t c = rows_in[0].t->shape[0];
  bool rg = false;
  for (const auto& r : rows_in) {
    if (r.t->shape.size() != 1 || r.t->shape[0] != c)
      throw ConfigError("stack_rows: length mismatch");
    rg = rg || r.t->requires_grad;
  }
  Var out = g.fresh({rows_in.size(), c}, rg);
  for (std::size_t r = 0; r < rows_in.size(); ++r)
    std::copy(rows_in[r].t->values.begin(), rows_in[r].t->values.end(),
              out.t->values.begin() + static_cast<std::ptrdiff_t>(r * c));
  if (!rg) return out;
  g.record([rows_in, out, c](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    for (std::size_t r = 0; r < rows_in.size(); ++r) {
      if (!rows_in[r].t->requires_grad) continue;
      auto& gr = Graph::slot(ws, rows_in[r].id, c);
      for (std::size_t j = 0; j < c; ++j) gr[j] += (*go)[r * c + j];
    }
  });
  return out;
}

// Row shift with zero fill: out[t] = a[t + offset] where defined, else 0.
inline Var shift_rows(Graph& g, const Var& a, std::ptrdiff_t offset) {
  if (a.t->shape.size() != 2) throw ConfigError("shift_rows: input must be 2-D");
  const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(a.t->shape[0]);
  const std::size_t c = a.t->shape[1];
  Var out = g.fresh(a.t->shape, a.t->requires_grad);
  for (std::ptrdiff_t t = 0; t < m; ++t) {
    const std::ptrdiff_t src = t + offset;
    if (src < 0 || src >= m) continue;
    std::copy_n(a.t->values.begin() + src * static_cast<std::ptrdiff_t>(c), c,
                out.t->values.begin() + t * static_cast<std::ptrdiff_t>(c));
  }
  if (!out.t->requires_grad) return out;
  g.record([a, out, offset, m, c](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& ga = Graph::slot(ws, a.id, a.t->size());
    for (std::ptrdiff_t t = 0; t < m; ++t) {
      const std::ptrdiff_t src = t + offset;
      if (src < 0 || src >= m) continue;
      for (std::size_t j = 0; j < c; ++j)
        ga[static_cast<std::size_t>(src) * c + j] += (*go)[static_cast<std::size_t>(t) * c + j];
    }
  });
  return out;
}

// Add a row vector to every row of a 2-D tensor.
inline Var add_rowvec(Graph& g, const Var& a, const Var& b) {
  if (a.t->shape.size() != 2 || b.t->shape.size() != 1 || a.t->shape[1] != b.t->shape[0])
    throw ConfigError("add_rowvec: incompatible shapes " + shape_str(a.t->shape) + " vs " +
                      shape_str(b.t->shape));
  const std::size_t m = a.t->shape[0], c = a.t->shape[1];
  Var out = g.fresh(a.t->shape, a.t->requires_grad || b.t->requires_grad);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < c; ++j)
      out.t->values[r * c + j] = a.t->values[r * c + j] + b.t->values[j];
  if (!out.t->requires_grad) return out;
  g.record([a, b, out, m, c](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    if (a.t->requires_grad) {
      auto& ga = Graph::slot(ws, a.id, m * c);
      for (std::size_t i = 0; i < m * c; ++i) ga[i] += (*go)[i];
    }
    if (b.t->requires_grad) {
      auto& gb = Graph::slot(ws, b.id, c);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j) gb[j] += (*go)[r * c + j];
    }
  });
  return out;
}

inline Var sum(Graph& g, const Var& a) {
  Var out = g.fresh({1}, a.t->requires_grad);
  double acc = 0.0;
  for (double v : a.t->values) acc += v;
  out.t->values[0] = acc;
  if (!out.t->requires_grad) return out;
  g.record([a, out](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& ga = Graph::slot(ws, a.id, a.t->size());
    for (auto& v : ga) v += (*go)[0];
  });
  return out;
}

using Mask = std::vector<std::uint8_t>;

// Numerically stabilized softmax over a 1-D vector. Masked positions are
// exactly zero in the output and receive zero gradient.
inline Var softmax(Graph& g, const Var& logits, const Mask* mask = nullptr) {
  if (logits.t->shape.size() != 1) throw ConfigError("softmax: input must be 1-D");
  const std::size_t n = logits.t->shape[0];
  if (mask && mask->size() != n) throw ConfigError("softmax: mask length mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  std::size_t live = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && !(*mask)[i]) continue;
    ++live;
    mx = std::max(mx, logits.t->values[i]);
  }
  if (live == 0) throw InvalidInputError("softmax: all positions masked");
  Var out = g.fresh({n}, logits.t->requires_grad);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && !(*mask)[i]) continue;
    out.t->values[i] = std::exp(logits.t->values[i] - mx);
    z += out.t->values[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (mask && !(*mask)[i]) continue;
    out.t->values[i] /= z;
  }
  if (!out.t->requires_grad) return out;
  Mask mcopy = mask ? *mask : Mask();
  g.record([logits, out, n, mcopy](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& gl = Graph::slot(ws, logits.id, n);
    double dot = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!mcopy.empty() && !mcopy[i]) continue;
      dot += (*go)[i] * out.t->values[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!mcopy.empty() && !mcopy[i]) continue;
      gl[i] += out.t->values[i] * ((*go)[i] - dot);
    }
  });
  return out;
}

// log(softmax(x)); stable. Used for the categorical cross-entropy.
inline Var log_softmax(Graph& g, const Var& logits) {
  if (logits.t->shape.size() != 1) throw ConfigError("log_softmax: input must be 1-D");
  const std::size_t n = logits.t->shape[0];
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits.t->values) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits.t->values) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Var out = g.fresh({n}, logits.t->requires_grad);
  for (std::size_t i = 0; i < n; ++i) out.t->values[i] = logits.t->values[i] - lse;
  if (!out.t->requires_grad) return out;
  g.record([logits, out, n](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& gl = Graph::slot(ws, logits.id, n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += (*go)[i];
    for (std::size_t i = 0; i < n; ++i) gl[i] += (*go)[i] - std::exp(out.t->values[i]) * total;
  });
  return out;
}

// Binary cross-entropy on a logit, stable in both tails:
//   max(z,0) - z*y + log(1 + exp(-|z|))
inline Var bce_with_logits(Graph& g, const Var& logit, double target) {
  if (!logit.t->is_scalar()) throw ConfigError("bce_with_logits: logit must be scalar");
  const double z = logit.t->values[0];
  Var out = g.fresh({1}, logit.t->requires_grad);
  out.t->values[0] = std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::fabs(z)));
  if (!out.t->requires_grad) return out;
  g.record([logit, out, z, target](Graph::GradWs& ws) {
    const auto* go = Graph::incoming(ws, out.id);
    if (!go) return;
    auto& gl = Graph::slot(ws, logit.id, 1);
    const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    gl[0] += (*go)[0] * (s - target);
  });
  return out;
}

}  // namespace attnmi
