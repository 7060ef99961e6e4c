#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnmi/adam.hpp"
#include "attnmi/autodiff.hpp"
#include "attnmi/errors.hpp"
#include "attnmi/rng.hpp"
#include "attnmi/serialize.hpp"
#include "attnmi/tensor.hpp"

namespace attnmi {

enum class EncoderKind { BiLstm, Cnn, Mlp };
enum class AttentionKind { Dot, Additive, Deep };
enum class Scoring { Softmax, GumbelSoftmax };
enum class Mode { Train, Eval };

inline std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::BiLstm: return "bilstm";
    case EncoderKind::Cnn: return "cnn";
    case EncoderKind::Mlp: return "mlp";
  }
  return "?";
}
inline std::string to_string(AttentionKind k) {
  switch (k) {
    case AttentionKind::Dot: return "dot";
    case AttentionKind::Additive: return "additive";
    case AttentionKind::Deep: return "deep";
  }
  return "?";
}
inline std::string to_string(Scoring s) {
  return s == Scoring::Softmax ? "softmax" : "gumbel_softmax";
}

inline EncoderKind encoder_from_string(const std::string& s) {
  if (s == "bilstm") return EncoderKind::BiLstm;
  if (s == "cnn") return EncoderKind::Cnn;
  if (s == "mlp") return EncoderKind::Mlp;
  throw ConfigError("unknown encoder_kind '" + s + "'");
}
inline AttentionKind attention_from_string(const std::string& s) {
  if (s == "dot") return AttentionKind::Dot;
  if (s == "additive") return AttentionKind::Additive;
  if (s == "deep") return AttentionKind::Deep;
  throw ConfigError("unknown attention_kind '" + s + "'");
}
inline Scoring scoring_from_string(const std::string& s) {
  if (s == "softmax") return Scoring::Softmax;
  if (s == "gumbel_softmax") return Scoring::GumbelSoftmax;
  throw ConfigError("unknown scoring '" + s + "'");
}

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 128;
  // 0 means "encoder default": 256 for bilstm (128 per direction), 128 otherwise.
  std::size_t hidden_dim = 0;
  EncoderKind encoder_kind = EncoderKind::BiLstm;
  AttentionKind attention_kind = AttentionKind::Additive;
  std::size_t deep_depth = 2;
  Scoring scoring = Scoring::Softmax;
  double gumbel_temperature = 0.8;
  std::size_t output_size = 1;
  bool uses_query = false;
  std::vector<std::size_t> cnn_kernel_sizes = {1, 3, 5, 7, 15};
  bool gumbel_noise_at_eval = false;
  // Width of the additive/deep attention hidden layers.
  std::size_t attention_hidden = 64;

  std::size_t hidden() const {
    if (hidden_dim != 0) return hidden_dim;
    return encoder_kind == EncoderKind::BiLstm ? 256 : 128;
  }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2");
    if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
    if (output_size == 0) throw ConfigError("output_size must be positive");
    if (gumbel_temperature <= 0.0) throw ConfigError("gumbel_temperature must be positive");
    if (deep_depth == 0) throw ConfigError("deep_depth must be at least 1");
    if (attention_hidden == 0) throw ConfigError("attention_hidden must be positive");
    if (encoder_kind == EncoderKind::BiLstm && hidden() % 2 != 0)
      throw ConfigError("bilstm hidden_dim must be even (split across directions)");
    if (encoder_kind == EncoderKind::Cnn) {
      if (cnn_kernel_sizes.empty()) throw ConfigError("cnn_kernel_sizes must be nonempty");
      for (std::size_t k : cnn_kernel_sizes)
        if (k % 2 == 0)
          throw ConfigError("cnn kernel sizes must be odd, got " + std::to_string(k));
      if (hidden() < cnn_kernel_sizes.size())
        throw ConfigError("hidden_dim smaller than the number of cnn kernels");
    }
  }

  // Channel counts per kernel; sums to hidden(). When hidden() is not a
  // multiple of the kernel count the remainder goes to the earliest kernels.
  std::vector<std::size_t> cnn_channels() const {
    const std::size_t k = cnn_kernel_sizes.size();
    const std::size_t base = hidden() / k, rem = hidden() % k;
    std::vector<std::size_t> out(k, base);
    for (std::size_t i = 0; i < rem; ++i) out[i] += 1;
    return out;
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden()},
          {"encoder_kind", to_string(c.encoder_kind)},
          {"attention_kind", to_string(c.attention_kind)},
          {"deep_depth", c.deep_depth},
          {"scoring", to_string(c.scoring)},
          {"gumbel_temperature", c.gumbel_temperature},
          {"output_size", c.output_size},
          {"uses_query", c.uses_query},
          {"cnn_kernel_sizes", c.cnn_kernel_sizes},
          {"gumbel_noise_at_eval", c.gumbel_noise_at_eval},
          {"attention_hidden", c.attention_hidden}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.embed_dim = j.value("embed_dim", std::size_t{128});
  c.hidden_dim = j.value("hidden_dim", std::size_t{0});
  c.encoder_kind = encoder_from_string(j.value("encoder_kind", std::string("bilstm")));
  c.attention_kind = attention_from_string(j.value("attention_kind", std::string("additive")));
  c.deep_depth = j.value("deep_depth", std::size_t{2});
  c.scoring = scoring_from_string(j.value("scoring", std::string("softmax")));
  c.gumbel_temperature = j.value("gumbel_temperature", 0.8);
  c.output_size = j.value("output_size", std::size_t{1});
  c.uses_query = j.value("uses_query", false);
  c.cnn_kernel_sizes = j.value("cnn_kernel_sizes", std::vector<std::size_t>{1, 3, 5, 7, 15});
  c.gumbel_noise_at_eval = j.value("gumbel_noise_at_eval", false);
  c.attention_hidden = j.value("attention_hidden", std::size_t{64});
  c.validate();
  return c;
}

// Temperature-scaled softmax with optional Gumbel(0,1) noise on the logits.
// With `noise == nullptr` this reduces to softmax(logits / temperature).
inline Var gumbel_softmax(Graph& g, const Var& logits, double temperature, Rng* noise,
                          const Mask* mask = nullptr) {
  if (temperature <= 0.0) throw ConfigError("gumbel_softmax temperature must be positive");
  Var z = logits;
  if (noise != nullptr) {
    Tensor n(logits.t->shape);
    for (auto& v : n.values) v = noise->gumbel();
    z = add(g, z, g.constant(std::move(n)));
  }
  return softmax(g, scale(g, z, 1.0 / temperature), mask);
}

// Encoder-attention-decoder classifier. Parameters live in a named map so
// regimes can freeze or reinitialize slices of the model by name prefix.
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_params();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }

  // Replace attention with a constant uniform distribution (the alternative
  // reading of the fixed-attention ablation). Scores stop depending on h and
  // carry no gradient.
  void set_uniform_attention(bool on) { uniform_attention_ = on; }
  bool uniform_attention() const { return uniform_attention_; }

  // Uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)]; LSTM forget-gate bias is then
  // set to 1.0.
  void init_params(Rng& rng) {
    for (auto& [name, t] : params_) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in_.at(name)));
      for (auto& v : t->values) v = rng.uniform(-bound, bound);
    }
    if (cfg_.encoder_kind == EncoderKind::BiLstm) {
      const std::size_t h = cfg_.hidden() / 2;
      for (const char* dir : {"enc.fwd.b", "enc.bwd.b"}) {
        auto& b = params_.at(dir);
        for (std::size_t i = h; i < 2 * h; ++i) b->values[i] = 1.0;
      }
    }
  }

  struct Forward {
    Var hidden;       // [T x l]
    Var attn_logits;  // [T]
    Var scores;       // [T]
    Var context;      // [l]
    Var logits;       // [o]
    Var probs;        // [o]; length-1 sigmoid for binary, softmax otherwise
  };

  Forward forward(Graph& g, const std::vector<std::size_t>& tokens,
                  const std::vector<std::size_t>* query_tokens, Mode mode,
                  Rng* noise = nullptr) const {
    if (tokens.empty()) throw InvalidInputError("token sequence must have length >= 1");
    Forward f;
    Var xe = embed(g, tokens);
    f.hidden = encode(g, xe);
    std::optional<Var> q;
    if (cfg_.uses_query) {
      if (query_tokens == nullptr || query_tokens->empty())
        throw ConfigError("model uses a query but none was provided");
      Var qh = encode(g, embed(g, *query_tokens));
      q = mean_rows(g, qh);
    }
    if (uniform_attention_) {
      const std::size_t t_len = tokens.size();
      f.attn_logits = g.constant(Tensor({t_len}));
      f.scores = g.constant(Tensor({t_len}, 1.0 / static_cast<double>(t_len)));
    } else {
      f.attn_logits = attention_logits(g, f.hidden, q);
      f.scores = normalize_scores(g, f.attn_logits, mode, noise);
    }
    f.context = vecmat(g, f.scores, f.hidden);
    f.logits = add(g, vecmat(g, f.context, g.var(params_.at("dec.W"))),
                   g.var(params_.at("dec.b")));
    f.probs = cfg_.output_size == 1 ? sigmoid(g, f.logits) : softmax(g, f.logits);
    return f;
  }

  Var embed(Graph& g, const std::vector<std::size_t>& tokens) const {
    for (std::size_t id : tokens)
      if (id >= cfg_.vocab_size)
        throw InvalidInputError("token id " + std::to_string(id) + " out of vocabulary (size " +
                                std::to_string(cfg_.vocab_size) + ")");
    return rows(g, g.var(params_.at("embedding")), tokens);
  }

  Var encode(Graph& g, const Var& xe) const {
    switch (cfg_.encoder_kind) {
      case EncoderKind::Mlp:
        return tanh_op(g, add_rowvec(g, matmul(g, xe, g.var(params_.at("enc.mlp.W"))),
                                     g.var(params_.at("enc.mlp.b"))));
      case EncoderKind::Cnn: return encode_cnn(g, xe);
      case EncoderKind::BiLstm: return encode_bilstm(g, xe);
    }
    throw ConfigError("unreachable encoder kind");
  }

  Var attention_logits(Graph& g, const Var& h, const std::optional<Var>& q) const {
    if (cfg_.uses_query && !q.has_value())
      throw ConfigError("attention requires a query vector for this model");
    switch (cfg_.attention_kind) {
      case AttentionKind::Dot: {
        if (cfg_.uses_query) {
          const double m = static_cast<double>(cfg_.hidden());
          return scale(g, matvec(g, h, *q), 1.0 / std::sqrt(m));
        }
        return matvec(g, h, g.var(params_.at("att.w")));
      }
      case AttentionKind::Additive: {
        Var u = matmul(g, h, g.var(params_.at("att.W2")));
        if (cfg_.uses_query) u = add_rowvec(g, u, vecmat(g, *q, g.var(params_.at("att.W3"))));
        return matvec(g, tanh_op(g, u), g.var(params_.at("att.w1")));
      }
      case AttentionKind::Deep: {
        Var z = matmul(g, h, g.var(params_.at("att.Wh")));
        if (cfg_.uses_query) z = add_rowvec(g, z, vecmat(g, *q, g.var(params_.at("att.WQ"))));
        Var x = relu(g, z);
        for (std::size_t i = 1; i < cfg_.deep_depth; ++i)
          x = relu(g, matmul(g, x, g.var(params_.at("att.D" + std::to_string(i)))));
        return matvec(g, x, g.var(params_.at("att.out")));
      }
    }
    throw ConfigError("unreachable attention kind");
  }

  Var normalize_scores(Graph& g, const Var& logits, Mode mode, Rng* noise) const {
    if (cfg_.scoring == Scoring::Softmax) return softmax(g, logits);
    const bool want_noise = (mode == Mode::Train) || cfg_.gumbel_noise_at_eval;
    return gumbel_softmax(g, logits, cfg_.gumbel_temperature, want_noise ? noise : nullptr);
  }

  // Cross-entropy: stable BCE on the single logit for binary tasks,
  // categorical negative log-likelihood otherwise.
  Var loss(Graph& g, const Forward& f, std::size_t label) const {
    if (label >= std::max<std::size_t>(2, cfg_.output_size))
      throw InvalidInputError("label " + std::to_string(label) + " out of range");
    if (cfg_.output_size == 1)
      return bce_with_logits(g, pick(g, f.logits, 0), static_cast<double>(label));
    return neg(g, pick(g, log_softmax(g, f.logits), label));
  }

  std::size_t predict(const Forward& f) const {
    if (cfg_.output_size == 1) return f.logits.t->values[0] > 0.0 ? 1 : 0;
    std::size_t best = 0;
    for (std::size_t i = 1; i < cfg_.output_size; ++i)
      if (f.logits.t->values[i] > f.logits.t->values[best]) best = i;
    return best;
  }

 private:
  Var encode_bilstm(Graph& g, const Var& xe) const {
    const std::size_t t_len = xe.t->shape[0];
    auto fwd = lstm_direction(g, xe, "enc.fwd.", false);
    auto bwd = lstm_direction(g, xe, "enc.bwd.", true);
    std::vector<Var> rows_out;
    rows_out.reserve(t_len);
    for (std::size_t t = 0; t < t_len; ++t)
      rows_out.push_back(concat(g, {fwd[t], bwd[t]}));
    return stack_rows(g, rows_out);
  }

  // One LSTM direction; returns per-step hidden vectors in input order.
  std::vector<Var> lstm_direction(Graph& g, const Var& xe, const std::string& prefix,
                                  bool reverse) const {
    const std::size_t t_len = xe.t->shape[0];
    const std::size_t h = cfg_.hidden() / 2;
    Var w = g.var(params_.at(prefix + "W"));
    Var u = g.var(params_.at(prefix + "U"));
    Var b = g.var(params_.at(prefix + "b"));
    Var hs = g.constant(Tensor({h}));
    Var cs = g.constant(Tensor({h}));
    std::vector<Var> out(t_len);
    for (std::size_t step = 0; step < t_len; ++step) {
      const std::size_t t = reverse ? t_len - 1 - step : step;
      Var xt = row(g, xe, t);
      Var pre = add(g, add(g, matvec(g, w, xt), matvec(g, u, hs)), b);
      Var gi = sigmoid(g, slice(g, pre, 0, h));
      Var gf = sigmoid(g, slice(g, pre, h, h));
      Var gg = tanh_op(g, slice(g, pre, 2 * h, h));
      Var go = sigmoid(g, slice(g, pre, 3 * h, h));
      cs = add(g, mul(g, gf, cs), mul(g, gi, gg));
      hs = mul(g, go, tanh_op(g, cs));
      out[t] = hs;
    }
    return out;
  }

  Var encode_cnn(Graph& g, const Var& xe) const {
    const std::size_t d = cfg_.embed_dim;
    std::vector<Var> per_kernel;
    for (std::size_t ki = 0; ki < cfg_.cnn_kernel_sizes.size(); ++ki) {
      const std::size_t k = cfg_.cnn_kernel_sizes[ki];
      const std::string base = "enc.conv" + std::to_string(k) + ".";
      Var w = g.var(params_.at(base + "W"));  // [k*d x c]
      Var acc;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t off =
            static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>((k - 1) / 2);
        Var term = matmul(g, shift_rows(g, xe, off), row_block(g, w, j * d, d));
        acc = acc.defined() ? add(g, acc, term) : term;
      }
      per_kernel.push_back(relu(g, add_rowvec(g, acc, g.var(params_.at(base + "b")))));
    }
    return concat_cols(g, per_kernel);
  }

  Var mean_rows(Graph& g, const Var& h) const {
    const std::size_t t_len = h.t->shape[0];
    Tensor w({t_len}, 1.0 / static_cast<double>(t_len));
    return vecmat(g, g.constant(std::move(w)), h);
  }

  void add_param(const std::string& name, Shape shape, std::size_t fan_in) {
    auto t = make_tensor(std::move(shape));
    t->requires_grad = true;
    params_.emplace(name, std::move(t));
    fan_in_.emplace(name, fan_in);
  }

  void build_params() {
    const std::size_t v = cfg_.vocab_size, d = cfg_.embed_dim, l = cfg_.hidden();
    const std::size_t ah = cfg_.attention_hidden, o = cfg_.output_size;
    add_param("embedding", {v, d}, d);
    switch (cfg_.encoder_kind) {
      case EncoderKind::BiLstm: {
        const std::size_t h = l / 2;
        for (const std::string dir : {"enc.fwd.", "enc.bwd."}) {
          add_param(dir + "W", {4 * h, d}, d);
          add_param(dir + "U", {4 * h, h}, h);
          add_param(dir + "b", {4 * h}, h);
        }
        break;
      }
      case EncoderKind::Cnn: {
        const auto channels = cfg_.cnn_channels();
        for (std::size_t ki = 0; ki < cfg_.cnn_kernel_sizes.size(); ++ki) {
          const std::size_t k = cfg_.cnn_kernel_sizes[ki];
          const std::string base = "enc.conv" + std::to_string(k) + ".";
          add_param(base + "W", {k * d, channels[ki]}, k * d);
          add_param(base + "b", {channels[ki]}, k * d);
        }
        break;
      }
      case EncoderKind::Mlp:
        add_param("enc.mlp.W", {d, l}, d);
        add_param("enc.mlp.b", {l}, d);
        break;
    }
    switch (cfg_.attention_kind) {
      case AttentionKind::Dot:
        if (!cfg_.uses_query) add_param("att.w", {l}, l);
        break;
      case AttentionKind::Additive:
        add_param("att.W2", {l, ah}, l);
        if (cfg_.uses_query) add_param("att.W3", {l, ah}, l);
        add_param("att.w1", {ah}, ah);
        break;
      case AttentionKind::Deep:
        add_param("att.Wh", {l, ah}, l);
        if (cfg_.uses_query) add_param("att.WQ", {l, ah}, l);
        for (std::size_t i = 1; i < cfg_.deep_depth; ++i)
          add_param("att.D" + std::to_string(i), {ah, ah}, ah);
        add_param("att.out", {ah}, ah);
        break;
    }
    add_param("dec.W", {l, o}, l);
    add_param("dec.b", {o}, l);
  }

  ModelConfig cfg_;
  ParamMap params_;
  std::map<std::string, std::size_t> fan_in_;
  bool uniform_attention_ = false;
};

// Model checkpoint: config plus the full parameter map in one JSON document.
inline void save_checkpoint(const std::string& path, const Model& model) {
  nlohmann::json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["config"] = config_to_json(model.config());
  j["params"] = params_to_json(model.params());
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  f << j.dump();
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "'");
  nlohmann::json j;
  f >> j;
  if (!j.contains("format_version") || j["format_version"].get<int>() != kCheckpointFormatVersion)
    throw ConfigError("unsupported checkpoint format in '" + path + "'");
  Model m(config_from_json(j.at("config")));
  ParamMap loaded = params_from_json(j.at("params"));
  copy_values(m.params(), loaded);
  return m;
}

}  // namespace attnmi
