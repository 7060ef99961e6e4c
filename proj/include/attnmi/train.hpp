#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnmi/adam.hpp"
#include "attnmi/data.hpp"
#include "attnmi/divergence.hpp"
#include "attnmi/errors.hpp"
#include "attnmi/model.hpp"

namespace attnmi {

enum class Regime { Normal, FixAttn, FixRep, Adversarial };
enum class FixAttnMode { FrozenParams, Uniform };
enum class KlDirection { AdvBase, BaseAdv };

inline std::string to_string(Regime r) {
  switch (r) {
    case Regime::Normal: return "normal";
    case Regime::FixAttn: return "fix_attn";
    case Regime::FixRep: return "fix_rep";
    case Regime::Adversarial: return "adversarial";
  }
  return "?";
}

inline Regime regime_from_string(const std::string& s) {
  if (s == "normal") return Regime::Normal;
  if (s == "fix_attn") return Regime::FixAttn;
  if (s == "fix_rep") return Regime::FixRep;
  if (s == "adversarial") return Regime::Adversarial;
  throw ConfigError("unknown regime '" + s + "'");
}

struct TrainConfig {
  std::size_t max_epochs = 40;
  std::size_t batch_size = 32;
  std::size_t patience = 5;  // epochs without validation improvement
  std::uint64_t seed = 0;
  Regime regime = Regime::Normal;
  double lambda = 0.0;           // adversarial only
  std::string base_checkpoint;   // fix_rep / adversarial only
  FixAttnMode fix_attn_mode = FixAttnMode::FrozenParams;
  bool fix_rep_trains_decoder = true;
  KlDirection kl_direction = KlDirection::AdvBase;
  AdamConfig adam;
  double clip_norm = 5.0;

  void validate() const {
    if (max_epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be >= 1");
    if (regime == Regime::Adversarial && lambda <= 0.0)
      throw ConfigError("adversarial regime requires lambda > 0");
  }
};

struct EpochLog {
  std::size_t epoch;
  double train_loss;
  double val_metric;
};

struct TrainReport {
  std::string regime = "normal";
  std::uint64_t seed = 0;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_metric = 0.0;
  std::string val_metric_name = "accuracy";
  double test_accuracy = 0.0;
  double test_f1 = 0.0;
  double lambda = 0.0;
  // Adversarial regime only; NaN otherwise.
  double mean_tvd_outputs = std::numeric_limits<double>::quiet_NaN();
  double mean_kl_attention = std::numeric_limits<double>::quiet_NaN();
  double mean_jsd_attention = std::numeric_limits<double>::quiet_NaN();

  nlohmann::json to_json() const {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& l : epochs)
      e.push_back({{"epoch", l.epoch}, {"train_loss", l.train_loss}, {"val_metric", l.val_metric}});
    nlohmann::json j = {{"regime", regime},
                        {"seed", seed},
                        {"epochs", e},
                        {"best_epoch", best_epoch},
                        {"best_val_metric", best_val_metric},
                        {"val_metric_name", val_metric_name},
                        {"test_accuracy", test_accuracy},
                        {"test_f1", test_f1}};
    if (regime == "adversarial") {
      j["lambda"] = lambda;
      j["mean_tvd_outputs"] = mean_tvd_outputs;
      j["mean_kl_attention"] = mean_kl_attention;
      j["mean_jsd_attention"] = mean_jsd_attention;
    }
    return j;
  }

  void write_epoch_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot open '" + path + "' for writing");
    f << "epoch,train_loss,val_metric\n";
    for (const auto& l : epochs)
      f << l.epoch << "," << l.train_loss << "," << l.val_metric << "\n";
  }
};

struct TrainResult {
  Model model;
  TrainReport report;
};

// Expand a model probability vector to an explicit distribution: binary
// heads emit [1-p, p], multi-class heads pass through.
inline std::vector<double> expand_probs(const std::vector<double>& probs) {
  if (probs.size() == 1) return {1.0 - probs[0], probs[0]};
  return probs;
}

inline double accuracy_on(const Model& model, const std::vector<Example>& split) {
  if (split.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& e : split) {
    Graph g;
    auto f = model.forward(g, e.tokens, e.query_tokens.empty() ? nullptr : &e.query_tokens,
                           Mode::Eval);
    if (model.predict(f) == e.label) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(split.size());
}

// Binary: F1 of class 1. Multi-class: macro average of per-class F1.
inline double f1_on(const Model& model, const std::vector<Example>& split,
                    std::size_t num_classes) {
  if (split.empty()) return 0.0;
  const std::size_t c = std::max<std::size_t>(2, num_classes);
  std::vector<std::size_t> tp(c, 0), fp(c, 0), fn(c, 0);
  for (const auto& e : split) {
    Graph g;
    auto f = model.forward(g, e.tokens, e.query_tokens.empty() ? nullptr : &e.query_tokens,
                           Mode::Eval);
    const std::size_t pred = model.predict(f);
    if (pred == e.label)
      tp[pred] += 1;
    else {
      fp[pred] += 1;
      fn[e.label] += 1;
    }
  }
  auto f1_of = [&](std::size_t k) {
    const double denom = static_cast<double>(2 * tp[k] + fp[k] + fn[k]);
    return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp[k]) / denom;
  };
  if (c == 2) return f1_of(1);
  double s = 0.0;
  for (std::size_t k = 0; k < c; ++k) s += f1_of(k);
  return s / static_cast<double>(c);
}

namespace detail {

// Per-example loss under the active regime; adversarial closes over the
// frozen base model's outputs.
using LossFn = std::function<Var(Graph&, const Model&, const Model::Forward&, const Example&,
                                 std::size_t /*example index*/)>;

struct EvalFn {
  std::function<double(const Model&)> fn;
  std::string name;
};

inline TrainReport train_loop(Model& model, const DatasetSplit& data, const TrainConfig& cfg,
                              const LossFn& loss_fn, const EvalFn& val_eval) {
  cfg.validate();
  if (data.train.empty() || data.validation.empty())
    throw ConfigError("training requires nonempty train and validation splits");

  Rng shuffle_rng(Rng::splitmix(cfg.seed + 0x51u));
  Rng noise_rng(Rng::splitmix(cfg.seed + 0x6eu));
  AdamState opt(cfg.adam);

  TrainReport report;
  report.regime = to_string(cfg.regime);
  report.seed = cfg.seed;
  report.lambda = cfg.lambda;
  report.val_metric_name = val_eval.name;

  double best = -std::numeric_limits<double>::infinity();
  ParamMap best_params;

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_total = 0.0;
    std::size_t seen = 0;
    // Indices of examples inside the shuffled order, batch by batch.
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero_grads(model.params());
      Graph g;
      Var acc;
      for (std::size_t i = start; i < end; ++i) {
        const Example& e = data.train[order[i]];
        auto f = model.forward(g, e.tokens, e.query_tokens.empty() ? nullptr : &e.query_tokens,
                               Mode::Train, &noise_rng);
        Var li = loss_fn(g, model, f, e, order[i]);
        acc = acc.defined() ? add(g, acc, li) : li;
      }
      Var batch_loss = scale(g, acc, 1.0 / static_cast<double>(end - start));
      if (!std::isfinite(batch_loss.scalar()))
        throw TrainError("loss diverged at epoch " + std::to_string(epoch));
      g.backward(batch_loss);
      clip_grad_norm(model.params(), cfg.clip_norm);
      adam_step(model.params(), opt);
      loss_total += batch_loss.scalar() * static_cast<double>(end - start);
      seen += end - start;
    }

    const double val = val_eval.fn(model);
    report.epochs.push_back({epoch, loss_total / static_cast<double>(seen), val});
    if (val > best) {
      best = val;
      report.best_epoch = epoch;
      best_params = deep_copy(model.params());
    } else if (epoch - report.best_epoch >= cfg.patience) {
      break;
    }
  }

  if (!best_params.empty()) copy_values(model.params(), best_params);
  report.best_val_metric = best;
  report.test_accuracy = accuracy_on(model, data.test);
  report.test_f1 = f1_on(model, data.test, data.num_classes);
  return report;
}

inline void freeze(ParamMap& params, const std::string& prefix) {
  for (auto& [name, t] : params)
    if (name.rfind(prefix, 0) == 0) t->requires_grad = false;
}

}  // namespace detail

inline std::size_t output_size_for(const DatasetSplit& data) {
  return data.num_classes == 2 ? 1 : data.num_classes;
}

// Supervised cross-entropy training with early stopping on validation
// accuracy; returns the best-validation checkpoint.
inline TrainResult train_normal(const ModelConfig& mc, const DatasetSplit& data,
                                const TrainConfig& cfg) {
  Model model(mc);
  Rng init_rng(Rng::splitmix(cfg.seed + 0x1au));
  model.init_params(init_rng);
  detail::LossFn loss = [](Graph& g, const Model& m, const Model::Forward& f, const Example& e,
                           std::size_t) { return m.loss(g, f, e.label); };
  detail::EvalFn val{[&data](const Model& m) { return accuracy_on(m, data.validation); },
                     "accuracy"};
  TrainReport rep = detail::train_loop(model, data, cfg, loss, val);
  return {std::move(model), std::move(rep)};
}

// Attention frozen; encoder and decoder train from scratch. In FrozenParams
// mode the attention weights keep their random initialization but scores
// still depend on the current hidden states; in Uniform mode scores are
// constant 1/T.
inline TrainResult train_fix_attn(const ModelConfig& mc, const DatasetSplit& data,
                                  const TrainConfig& cfg) {
  Model model(mc);
  Rng init_rng(Rng::splitmix(cfg.seed + 0x1au));
  model.init_params(init_rng);
  if (cfg.fix_attn_mode == FixAttnMode::Uniform) model.set_uniform_attention(true);
  detail::freeze(model.params(), "att.");
  detail::LossFn loss = [](Graph& g, const Model& m, const Model::Forward& f, const Example& e,
                           std::size_t) { return m.loss(g, f, e.label); };
  detail::EvalFn val{[&data](const Model& m) { return accuracy_on(m, data.validation); },
                     "accuracy"};
  TrainReport rep = detail::train_loop(model, data, cfg, loss, val);
  rep.regime = "fix_attn";
  return {std::move(model), std::move(rep)};
}

// Embedding and encoder copied from a normally trained base and frozen;
// attention (and by default the decoder) reinitialized and trained.
inline TrainResult train_fix_rep(const ModelConfig& mc, const Model& base,
                                 const DatasetSplit& data, const TrainConfig& cfg) {
  if (config_to_json(mc) != config_to_json(base.config()))
    throw ConfigError("fix_rep model config does not match the base checkpoint config");
  Model model(base.config());
  Rng init_rng(Rng::splitmix(cfg.seed + 0x1au));
  model.init_params(init_rng);
  for (auto& [name, t] : model.params()) {
    const bool encoder_side = name == "embedding" || name.rfind("enc.", 0) == 0;
    const bool decoder_side = name.rfind("dec.", 0) == 0;
    if (encoder_side || (decoder_side && !cfg.fix_rep_trains_decoder)) {
      t->values = base.params().at(name)->values;
      t->requires_grad = false;
    }
  }
  detail::LossFn loss = [](Graph& g, const Model& m, const Model::Forward& f, const Example& e,
                           std::size_t) { return m.loss(g, f, e.label); };
  detail::EvalFn val{[&data](const Model& m) { return accuracy_on(m, data.validation); },
                     "accuracy"};
  TrainReport rep = detail::train_loop(model, data, cfg, loss, val);
  rep.regime = "fix_rep";
  return {std::move(model), std::move(rep)};
}

namespace detail {

struct BaseOutputs {
  std::vector<std::vector<double>> probs;      // expanded distributions
  std::vector<std::vector<double>> attention;  // per-example score vectors
};

inline BaseOutputs base_outputs_for(const Model& base, const std::vector<Example>& split) {
  BaseOutputs out;
  out.probs.reserve(split.size());
  out.attention.reserve(split.size());
  for (const auto& e : split) {
    Graph g;
    auto f = base.forward(g, e.tokens, e.query_tokens.empty() ? nullptr : &e.query_tokens,
                          Mode::Eval);
    out.probs.push_back(expand_probs(f.probs.t->values));
    out.attention.push_back(f.scores.t->values);
  }
  return out;
}

// Differentiable TVD between the model's output distribution and a fixed one.
inline Var tvd_to_const(Graph& g, const Model::Forward& f, const std::vector<double>& base) {
  Var p = f.probs;
  if (p.t->size() == 1) {
    Var one = g.constant_scalar(1.0);
    p = concat(g, {sub(g, one, p), p});
  }
  Var diff = sub(g, p, g.constant(Tensor({base.size()}, std::vector<double>(base))));
  return scale(g, sum(g, abs_op(g, diff)), 0.5);
}

// Differentiable KL between the adversary's attention and the base's.
inline Var attention_kl(Graph& g, const Var& scores, const std::vector<double>& base,
                        KlDirection dir) {
  const std::size_t n = base.size();
  std::vector<double> logb(n), bvals(base);
  for (std::size_t i = 0; i < n; ++i) logb[i] = std::log(std::max(base[i], 1e-300));
  Var log_a = log_op(g, scores);
  if (dir == KlDirection::AdvBase) {
    // KL(a || b) = sum a * (log a - log b)
    Var diff = sub(g, log_a, g.constant(Tensor({n}, std::move(logb))));
    return sum(g, mul(g, scores, diff));
  }
  // KL(b || a) = sum b * (log b - log a)
  Var diff = sub(g, g.constant(Tensor({n}, std::move(logb))), log_a);
  return sum(g, mul(g, g.constant(Tensor({n}, std::move(bvals))), diff));
}

}  // namespace detail

// Train an adversary that imitates the frozen base model's outputs while
// pushing its attention distribution away from the base's:
//   minimize  mean_i [ TVD(y_a, y_b) - lambda * KL(a_a, a_b) ]
inline TrainResult train_adversarial(const Model& base, const DatasetSplit& data,
                                     const TrainConfig& cfg) {
  if (cfg.lambda <= 0.0) throw ConfigError("adversarial regime requires lambda > 0");
  Model model(base.config());
  Rng init_rng(Rng::splitmix(cfg.seed + 0x1au));
  model.init_params(init_rng);

  const auto base_train = detail::base_outputs_for(base, data.train);
  const auto base_val = detail::base_outputs_for(base, data.validation);

  const double lambda = cfg.lambda;
  const KlDirection dir = cfg.kl_direction;
  detail::LossFn loss = [&base_train, lambda, dir](Graph& g, const Model&,
                                                   const Model::Forward& f, const Example&,
                                                   std::size_t idx) {
    Var t = detail::tvd_to_const(g, f, base_train.probs[idx]);
    Var k = detail::attention_kl(g, f.scores, base_train.attention[idx], dir);
    return sub(g, t, scale(g, k, lambda));
  };

  // Validation objective: the adversarial loss itself, negated so the loop
  // can keep maximizing.
  detail::EvalFn val{[&data, &base_val, lambda, dir](const Model& m) {
                       double total = 0.0;
                       for (std::size_t i = 0; i < data.validation.size(); ++i) {
                         const Example& e = data.validation[i];
                         Graph g;
                         auto f = m.forward(
                             g, e.tokens, e.query_tokens.empty() ? nullptr : &e.query_tokens,
                             Mode::Eval);
                         Var t = detail::tvd_to_const(g, f, base_val.probs[i]);
                         Var k = detail::attention_kl(g, f.scores, base_val.attention[i], dir);
                         total += t.scalar() - lambda * k.scalar();
                       }
                       return -total / static_cast<double>(data.validation.size());
                     },
                     "neg_adversarial_objective"};

  TrainReport rep = detail::train_loop(model, data, cfg, loss, val);
  rep.regime = "adversarial";
  rep.lambda = cfg.lambda;

  // Divergence summary against the base on the test split.
  const auto base_test = detail::base_outputs_for(base, data.test);
  double tvd_sum = 0.0, kl_sum = 0.0, jsd_sum = 0.0;
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    const Example& e = data.test[i];
    Graph g;
    auto f = model.forward(g, e.tokens, e.query_tokens.empty() ? nullptr : &e.query_tokens,
                           Mode::Eval);
    const auto probs = expand_probs(f.probs.t->values);
    tvd_sum += tvd(probs, base_test.probs[i]);
    bool inf = false;
    const double k = kl(f.scores.t->values, base_test.attention[i], &inf);
    kl_sum += inf ? 0.0 : k;
    jsd_sum += jsd(f.scores.t->values, base_test.attention[i]);
  }
  const auto nt = static_cast<double>(std::max<std::size_t>(1, data.test.size()));
  rep.mean_tvd_outputs = tvd_sum / nt;
  rep.mean_kl_attention = kl_sum / nt;
  rep.mean_jsd_attention = jsd_sum / nt;
  return {std::move(model), std::move(rep)};
}

}  // namespace attnmi
