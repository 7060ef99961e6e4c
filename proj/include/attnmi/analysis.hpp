#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnmi/data.hpp"
#include "attnmi/errors.hpp"
#include "attnmi/kendall.hpp"
#include "attnmi/kmeans.hpp"
#include "attnmi/mi.hpp"
#include "attnmi/model.hpp"
#include "attnmi/util.hpp"

namespace attnmi {

// Everything the analyzer needs from one evaluated sample.
struct AttentionRecord {
  std::size_t id = 0;
  std::size_t t_len = 0;
  std::size_t hidden_dim = 0;
  std::vector<double> hidden;     // t_len x hidden_dim, row major
  std::vector<double> attention;  // t_len
  std::vector<double> logits;     // output_size
  std::size_t predicted = 0;
  std::size_t label = 0;
  std::ptrdiff_t signal_pos = -1;  // generator ground truth when known
};

// Evaluate the model on a split and record hidden states, attention and
// outputs per sample. Deterministic: eval mode, no noise.
inline std::vector<AttentionRecord> capture(const Model& model,
                                            const std::vector<Example>& split) {
  std::vector<AttentionRecord> out;
  out.reserve(split.size());
  for (std::size_t i = 0; i < split.size(); ++i) {
    const Example& e = split[i];
    Graph g;
    auto f = model.forward(g, e.tokens, e.query_tokens.empty() ? nullptr : &e.query_tokens,
                           Mode::Eval);
    AttentionRecord r;
    r.id = i;
    r.t_len = e.tokens.size();
    r.hidden_dim = f.hidden.t->shape[1];
    r.hidden = f.hidden.t->values;
    r.attention = f.scores.t->values;
    r.logits = f.logits.t->values;
    r.predicted = model.predict(f);
    r.label = e.label;
    r.signal_pos = e.signal_pos;
    out.push_back(std::move(r));
  }
  return out;
}

struct KSelection {
  std::size_t k = 1;
  std::size_t k_percentile = 1;  // 10th percentile of sequence lengths
  std::size_t k_attention = 1;   // 80% rule on the k-th largest attention
};

// k = min(10th-percentile-of-lengths, largest k such that >= 80% of samples
// have their k-th largest attention weight above 1e-5); floored at 1.
inline KSelection select_k(const std::vector<AttentionRecord>& records,
                           double weight_floor = 1e-5, double coverage = 0.8) {
  if (records.empty()) throw AnalysisError("select_k: no records");
  std::vector<std::size_t> lengths;
  lengths.reserve(records.size());
  std::size_t max_len = 1;
  for (const auto& r : records) {
    lengths.push_back(r.t_len);
    max_len = std::max(max_len, r.t_len);
  }
  std::sort(lengths.begin(), lengths.end());
  // Nearest-rank percentile.
  const std::size_t idx =
      lengths.empty() ? 0
                      : std::max<std::size_t>(
                            1, static_cast<std::size_t>(
                                   std::ceil(0.10 * static_cast<double>(lengths.size())))) -
                            1;
  KSelection sel;
  sel.k_percentile = std::max<std::size_t>(1, lengths[idx]);

  // Per sample, sorted attention descending; count samples whose k-th
  // largest weight clears the floor. Monotone in k, so scan upward.
  std::vector<std::vector<double>> sorted;
  sorted.reserve(records.size());
  for (const auto& r : records) {
    auto a = r.attention;
    std::sort(a.begin(), a.end(), std::greater<>());
    sorted.push_back(std::move(a));
  }
  const double need = coverage * static_cast<double>(records.size());
  sel.k_attention = 1;
  for (std::size_t k = 1; k <= max_len; ++k) {
    std::size_t good = 0;
    for (const auto& a : sorted)
      if (a.size() >= k && a[k - 1] > weight_floor) ++good;
    if (static_cast<double>(good) >= need)
      sel.k_attention = k;
    else
      break;
  }
  sel.k = std::max<std::size_t>(1, std::min(sel.k_percentile, sel.k_attention));
  return sel;
}

struct RankGroup {
  std::size_t rank = 1;          // 1 = largest attention
  std::vector<double> vectors;   // retained x hidden_dim, row major
  std::size_t count = 0;
  std::size_t dim = 0;
  double mean_attention = 0.0;
};

// Group the rank-r representation of every retained sample (those with
// length >= k). Ties in attention break toward the earlier position.
inline std::vector<RankGroup> rank_group(const std::vector<AttentionRecord>& records,
                                         std::size_t k) {
  if (k == 0) throw AnalysisError("rank_group: k must be >= 1");
  std::vector<const AttentionRecord*> retained;
  for (const auto& r : records)
    if (r.t_len >= k) retained.push_back(&r);
  if (retained.empty()) throw AnalysisError("rank_group: no sample has length >= k");

  std::vector<RankGroup> groups(k);
  for (std::size_t r = 0; r < k; ++r) {
    groups[r].rank = r + 1;
    groups[r].dim = retained[0]->hidden_dim;
    groups[r].vectors.reserve(retained.size() * groups[r].dim);
  }
  for (const auto* rec : retained) {
    std::vector<std::size_t> pos(rec->t_len);
    std::iota(pos.begin(), pos.end(), 0);
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
      return rec->attention[a] > rec->attention[b];  // stable: earlier wins ties
    });
    for (std::size_t r = 0; r < k; ++r) {
      const std::size_t p = pos[r];
      groups[r].mean_attention += rec->attention[p];
      const double* row = rec->hidden.data() + p * rec->hidden_dim;
      groups[r].vectors.insert(groups[r].vectors.end(), row, row + rec->hidden_dim);
      groups[r].count += 1;
    }
  }
  for (auto& gr : groups) gr.mean_attention /= static_cast<double>(gr.count);
  return groups;
}

// Mean normalized entropy of the attention distributions, in [0, 1].
// Length-1 sequences contribute zero.
inline double attention_entropy(const std::vector<AttentionRecord>& records) {
  if (records.empty()) throw AnalysisError("attention_entropy: no records");
  double total = 0.0;
  for (const auto& r : records) {
    if (r.t_len <= 1) continue;
    double h = 0.0;
    for (double a : r.attention)
      if (a > 0.0) h -= a * std::log(a);
    total += h / std::log(static_cast<double>(r.t_len));
  }
  return total / static_cast<double>(records.size());
}

struct AnalysisConfig {
  QuantizerConfig quantizer;
  std::size_t permutations = 200;
  // Fit one quantizer over all ranks' vectors instead of one per rank
  // (sensitivity variant).
  bool shared_quantizer = false;
  // When all rank means lie within this spread the tau is flagged degenerate.
  double degenerate_spread = 0.01;
  std::string split = "test";
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    return {{"permutations", permutations},
            {"shared_quantizer", shared_quantizer},
            {"degenerate_spread", degenerate_spread},
            {"split", split},
            {"seed", seed},
            {"quantizer",
             {{"representation_start", quantizer.representation_start},
              {"representation_cap", quantizer.representation_cap},
              {"decrement", quantizer.decrement},
              {"logit_clusters", quantizer.logit_clusters},
              {"allow_growth", quantizer.allow_growth}}}};
  }
};

inline AnalysisConfig analysis_config_from_json(const nlohmann::json& j) {
  AnalysisConfig c;
  c.permutations = j.value("permutations", std::size_t{200});
  c.shared_quantizer = j.value("shared_quantizer", false);
  c.degenerate_spread = j.value("degenerate_spread", 0.01);
  c.split = j.value("split", std::string("test"));
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("quantizer")) {
    const auto& q = j.at("quantizer");
    c.quantizer.representation_start = q.value("representation_start", std::size_t{50});
    c.quantizer.representation_cap = q.value("representation_cap", std::size_t{200});
    c.quantizer.decrement = q.value("decrement", std::size_t{5});
    c.quantizer.logit_clusters = q.value("logit_clusters", std::size_t{5});
    c.quantizer.allow_growth = q.value("allow_growth", false);
  }
  return c;
}

struct RankStat {
  std::size_t rank = 1;
  double mi_bits = 0.0;
  double mean_attention = 0.0;
  std::size_t n_clusters = 0;
  double permutation_baseline_mean = 0.0;
  double permutation_baseline_sd = 0.0;
  double permutation_p = 1.0;
};

struct AnalysisReport {
  std::size_t k = 1;
  std::size_t k_percentile = 1;
  std::size_t k_attention = 1;
  std::size_t retained_samples = 0;
  std::vector<RankStat> per_rank;
  double weighted_kendall_tau = 0.0;
  std::string tau_confidence = "ok";  // "ok" or "degenerate"
  double mean_normalized_entropy = 0.0;
  std::size_t output_clusters = 0;  // 0 when predicted categories are used
  std::string config_hash;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const {
    nlohmann::json ranks = nlohmann::json::array();
    for (const auto& r : per_rank)
      ranks.push_back({{"rank", r.rank},
                       {"mi_bits", r.mi_bits},
                       {"mean_attention", r.mean_attention},
                       {"n_clusters", r.n_clusters},
                       {"permutation_baseline_mean", r.permutation_baseline_mean},
                       {"permutation_baseline_sd", r.permutation_baseline_sd},
                       {"permutation_p", r.permutation_p}});
    return {{"k", k},
            {"k_percentile", k_percentile},
            {"k_attention", k_attention},
            {"retained_samples", retained_samples},
            {"per_rank", ranks},
            {"weighted_kendall_tau", weighted_kendall_tau},
            {"tau_confidence", tau_confidence},
            {"mean_normalized_entropy", mean_normalized_entropy},
            {"output_clusters", output_clusters},
            {"config_hash", config_hash},
            {"seeds", {seed}}};
  }
};

inline AnalysisReport analysis_report_from_json(const nlohmann::json& j) {
  AnalysisReport r;
  r.k = j.at("k").get<std::size_t>();
  r.k_percentile = j.value("k_percentile", r.k);
  r.k_attention = j.value("k_attention", r.k);
  r.retained_samples = j.value("retained_samples", std::size_t{0});
  for (const auto& e : j.at("per_rank")) {
    RankStat s;
    s.rank = e.at("rank").get<std::size_t>();
    s.mi_bits = e.at("mi_bits").get<double>();
    s.mean_attention = e.at("mean_attention").get<double>();
    s.n_clusters = e.value("n_clusters", std::size_t{0});
    s.permutation_baseline_mean = e.value("permutation_baseline_mean", 0.0);
    s.permutation_baseline_sd = e.value("permutation_baseline_sd", 0.0);
    s.permutation_p = e.value("permutation_p", 1.0);
    r.per_rank.push_back(s);
  }
  r.weighted_kendall_tau = j.at("weighted_kendall_tau").get<double>();
  r.tau_confidence = j.value("tau_confidence", std::string("ok"));
  r.mean_normalized_entropy = j.value("mean_normalized_entropy", 0.0);
  r.output_clusters = j.value("output_clusters", std::size_t{0});
  r.config_hash = j.value("config_hash", std::string());
  return r;
}

namespace detail {

// Output side of the MI estimate: binary heads cluster the logits, larger
// heads use the predicted category directly.
inline std::pair<std::vector<std::size_t>, std::size_t> output_labels(
    const std::vector<const AttentionRecord*>& retained, std::size_t output_size,
    const AnalysisConfig& cfg) {
  std::vector<std::size_t> labels(retained.size());
  if (output_size > 1) {
    for (std::size_t i = 0; i < retained.size(); ++i) labels[i] = retained[i]->predicted;
    return {labels, 0};
  }
  std::vector<double> logits;
  logits.reserve(retained.size());
  for (const auto* r : retained) logits.push_back(r->logits.at(0));
  KMeansResult q = fit_quantizer(logits, logits.size(), 1, QuantizeTarget::Logit,
                                 Rng::splitmix(cfg.seed + 0x0107), cfg.quantizer);
  return {q.assignment, q.n_clusters};
}

}  // namespace detail

// Full measurement pipeline: select k, group by attention rank, quantize,
// estimate MI per rank, and correlate MI order with attention order.
inline AnalysisReport analyze(const std::vector<AttentionRecord>& records,
                              std::size_t output_size, const AnalysisConfig& cfg) {
  if (records.empty()) throw AnalysisError("analyze: no records");
  AnalysisReport rep;
  rep.seed = cfg.seed;
  rep.config_hash = fnv1a_hex(cfg.to_json().dump());

  const KSelection sel = select_k(records);
  rep.k = sel.k;
  rep.k_percentile = sel.k_percentile;
  rep.k_attention = sel.k_attention;

  auto groups = rank_group(records, sel.k);
  rep.retained_samples = groups.front().count;

  std::vector<const AttentionRecord*> retained;
  for (const auto& r : records)
    if (r.t_len >= sel.k) retained.push_back(&r);

  auto [out_labels, out_clusters] = detail::output_labels(retained, output_size, cfg);
  rep.output_clusters = out_clusters;

  // Optional shared quantizer fitted on the union of all rank groups.
  KMeansResult shared;
  if (cfg.shared_quantizer) {
    std::vector<double> all;
    for (const auto& gr : groups) all.insert(all.end(), gr.vectors.begin(), gr.vectors.end());
    shared = fit_quantizer(all, groups.size() * groups.front().count, groups.front().dim,
                           QuantizeTarget::Representation, Rng::splitmix(cfg.seed + 0x2000),
                           cfg.quantizer);
  }

  std::vector<double> mi_values, mean_attention;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& gr = groups[gi];
    std::vector<std::size_t> rep_labels;
    std::size_t n_clusters = 0;
    if (cfg.shared_quantizer) {
      rep_labels.assign(shared.assignment.begin() + static_cast<std::ptrdiff_t>(gi * gr.count),
                        shared.assignment.begin() +
                            static_cast<std::ptrdiff_t>((gi + 1) * gr.count));
      n_clusters = shared.n_clusters;
    } else {
      KMeansResult q =
          fit_quantizer(gr.vectors, gr.count, gr.dim, QuantizeTarget::Representation,
                        Rng::splitmix(cfg.seed + 0x3000 + gi), cfg.quantizer);
      rep_labels = q.assignment;
      n_clusters = q.n_clusters;
    }
    RankStat stat;
    stat.rank = gr.rank;
    stat.mean_attention = gr.mean_attention;
    stat.n_clusters = n_clusters;
    stat.mi_bits = mutual_information_bits(rep_labels, out_labels);
    const auto base = mi_permutation_baseline(rep_labels, out_labels, stat.mi_bits,
                                              cfg.permutations,
                                              Rng::splitmix(cfg.seed + 0x4000 + gi));
    stat.permutation_baseline_mean = base.mean;
    stat.permutation_baseline_sd = base.sd;
    stat.permutation_p = base.p_value;
    rep.per_rank.push_back(stat);
    mi_values.push_back(stat.mi_bits);
    mean_attention.push_back(stat.mean_attention);
  }

  rep.mean_normalized_entropy = attention_entropy(records);

  if (sel.k < 2) {
    rep.weighted_kendall_tau = 0.0;
    rep.tau_confidence = "degenerate";
  } else {
    rep.weighted_kendall_tau = weighted_kendall(mi_values, mean_attention);
    const auto [mn, mx] = std::minmax_element(mean_attention.begin(), mean_attention.end());
    rep.tau_confidence = (*mx - *mn) < cfg.degenerate_spread ? "degenerate" : "ok";
  }
  return rep;
}

// The per-rank (MI, mean attention) profile on its own.
inline std::pair<std::vector<double>, std::vector<double>> rank_mi_profile(
    const std::vector<AttentionRecord>& records, std::size_t output_size,
    const AnalysisConfig& cfg) {
  AnalysisReport rep = analyze(records, output_size, cfg);
  std::vector<double> mi, abar;
  for (const auto& r : rep.per_rank) {
    mi.push_back(r.mi_bits);
    abar.push_back(r.mean_attention);
  }
  return {mi, abar};
}

// ---- Record dump format -------------------------------------------------
// JSONL, one record per line:
//   {"id":..,"T":..,"hidden":[[..l floats..] x T],"attention":[..T..],
//    "logits":[..o..],"pred":..,"label":..}
// External models can produce this file and feed the analyzer directly.

inline void save_records_jsonl(const std::string& path,
                               const std::vector<AttentionRecord>& records) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  for (const auto& r : records) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t t = 0; t < r.t_len; ++t) {
      rows.push_back(std::vector<double>(r.hidden.begin() + static_cast<std::ptrdiff_t>(t * r.hidden_dim),
                                         r.hidden.begin() + static_cast<std::ptrdiff_t>((t + 1) * r.hidden_dim)));
    }
    nlohmann::json j = {{"id", r.id},       {"T", r.t_len},   {"hidden", rows},
                        {"attention", r.attention}, {"logits", r.logits}, {"pred", r.predicted},
                        {"label", r.label}};
    if (r.signal_pos >= 0) j["signal_pos"] = r.signal_pos;
    f << j.dump() << "\n";
  }
}

inline std::vector<AttentionRecord> load_records_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IngestError("cannot open '" + path + "'");
  std::vector<AttentionRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      AttentionRecord r;
      r.id = j.at("id").get<std::size_t>();
      r.t_len = j.at("T").get<std::size_t>();
      const auto& rows = j.at("hidden");
      if (rows.size() != r.t_len)
        throw IngestError("line " + std::to_string(line_no) + ": hidden row count != T");
      r.hidden_dim = rows.empty() ? 0 : rows.front().size();
      for (const auto& row : rows) {
        const auto vals = row.get<std::vector<double>>();
        if (vals.size() != r.hidden_dim)
          throw IngestError("line " + std::to_string(line_no) + ": ragged hidden rows");
        r.hidden.insert(r.hidden.end(), vals.begin(), vals.end());
      }
      r.attention = j.at("attention").get<std::vector<double>>();
      if (r.attention.size() != r.t_len)
        throw IngestError("line " + std::to_string(line_no) + ": attention length != T");
      r.logits = j.at("logits").get<std::vector<double>>();
      r.predicted = j.at("pred").get<std::size_t>();
      r.label = j.at("label").get<std::size_t>();
      r.signal_pos = j.value("signal_pos", std::ptrdiff_t{-1});
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw IngestError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace attnmi
