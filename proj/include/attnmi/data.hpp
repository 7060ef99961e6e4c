#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnmi/autodiff.hpp"
#include "attnmi/errors.hpp"
#include "attnmi/rng.hpp"

namespace attnmi {

struct Example {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;
  std::vector<std::size_t> query_tokens;  // empty when the task has no query
  // Generator metadata: position of the planted signal token, -1 when unknown.
  std::ptrdiff_t signal_pos = -1;
};

struct Vocabulary {
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;

  std::map<std::string, std::size_t> token_to_id;
  std::vector<std::string> id_to_token{"<pad>", "<unk>"};

  std::size_t size() const { return id_to_token.size(); }

  std::size_t add(const std::string& tok) {
    auto it = token_to_id.find(tok);
    if (it != token_to_id.end()) return it->second;
    const std::size_t id = id_to_token.size();
    token_to_id.emplace(tok, id);
    id_to_token.push_back(tok);
    return id;
  }

  std::size_t id_of(const std::string& tok) const {
    auto it = token_to_id.find(tok);
    return it == token_to_id.end() ? kUnk : it->second;
  }
};

struct DatasetSplit {
  std::vector<Example> train;
  std::vector<Example> validation;
  std::vector<Example> test;
  Vocabulary vocab;           // empty for integer-token corpora
  std::size_t vocab_size = 0;
  std::size_t num_classes = 2;
  bool has_query = false;

  std::string name = "dataset";
  nlohmann::json source = nlohmann::json::object();  // generator params or file path
  std::uint64_t seed = 0;

  std::vector<std::size_t> class_counts(const std::vector<Example>& split) const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto& e : split) counts[e.label] += 1;
    return counts;
  }

  const std::vector<Example>& split(const std::string& which) const {
    if (which == "train") return train;
    if (which == "validation") return validation;
    if (which == "test") return test;
    throw ConfigError("unknown split '" + which + "'");
  }

  nlohmann::json manifest() const {
    return {{"name", name},
            {"source", source},
            {"seed", seed},
            {"sizes",
             {{"train", train.size()}, {"validation", validation.size()}, {"test", test.size()}}},
            {"class_counts",
             {{"train", class_counts(train)},
              {"validation", class_counts(validation)},
              {"test", class_counts(test)}}},
            {"vocab_size", vocab_size},
            {"num_classes", num_classes},
            {"has_query", has_query}};
  }
};

struct SplitFractions {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
};

// Binary entropy in bits; H_b(0) = H_b(1) = 0.
inline double binary_entropy_bits(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log2(p) - (1.0 - p) * std::log2(1.0 - p);
}

namespace detail {

inline void shuffle_and_partition(std::vector<Example>& all, SplitFractions frac, Rng& rng,
                                  DatasetSplit& out) {
  rng.shuffle(all);
  const std::size_t n = all.size();
  const auto n_train = static_cast<std::size_t>(std::lround(frac.train * static_cast<double>(n)));
  const auto n_val =
      static_cast<std::size_t>(std::lround(frac.validation * static_cast<double>(n)));
  if (n_train + n_val >= n) throw ConfigError("split fractions leave no test examples");
  out.train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.validation.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                        all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), all.end());
}

inline std::vector<std::string> tokenize_lower(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    for (auto& ch : w) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    out.push_back(w);
  }
  return out;
}

}  // namespace detail

struct LoadOptions {
  std::size_t min_frequency = 2;  // rarer train words map to UNK
  SplitFractions fractions;
};

// Load a JSONL corpus (one object per line with `text` or `tokens`, `label`,
// optional `query`), split it deterministically, and build the vocabulary
// from the train split only.
inline DatasetSplit load_jsonl(const std::string& path, std::uint64_t seed,
                               LoadOptions opts = {}) {
  std::ifstream f(path);
  if (!f) throw IngestError("cannot open '" + path + "'");

  struct RawExample {
    std::vector<std::string> words;
    std::vector<std::string> query_words;
    std::vector<std::size_t> int_tokens;
    std::vector<std::size_t> int_query;
    std::size_t label = 0;
  };
  std::vector<RawExample> raw;
  bool any_text = false, any_int = false;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IngestError("line " + std::to_string(line_no) + ": " + e.what());
    }
    RawExample r;
    try {
      if (j.contains("text")) {
        r.words = detail::tokenize_lower(j.at("text").get<std::string>());
        any_text = true;
      } else if (j.contains("tokens")) {
        r.int_tokens = j.at("tokens").get<std::vector<std::size_t>>();
        any_int = true;
      } else {
        throw IngestError("line " + std::to_string(line_no) + ": needs 'text' or 'tokens'");
      }
      r.label = j.at("label").get<std::size_t>();
      if (j.contains("query")) {
        if (j.at("query").is_string())
          r.query_words = detail::tokenize_lower(j.at("query").get<std::string>());
        else
          r.int_query = j.at("query").get<std::vector<std::size_t>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw IngestError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (r.words.empty() && r.int_tokens.empty())
      throw IngestError("line " + std::to_string(line_no) + ": empty token sequence");
    for (std::size_t id : r.int_tokens)
      if (id == Vocabulary::kPad)
        throw IngestError("line " + std::to_string(line_no) + ": token id 0 is reserved");
    raw.push_back(std::move(r));
  }
  if (raw.empty()) throw IngestError("empty dataset in '" + path + "'");
  if (any_text && any_int) throw IngestError("mixed 'text' and 'tokens' records in one corpus");

  std::vector<std::size_t> order(raw.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const std::size_t n = raw.size();
  const auto n_train =
      static_cast<std::size_t>(std::lround(opts.fractions.train * static_cast<double>(n)));
  const auto n_val =
      static_cast<std::size_t>(std::lround(opts.fractions.validation * static_cast<double>(n)));
  if (n >= 3 && n_train + n_val >= n) throw ConfigError("split fractions leave no test examples");

  DatasetSplit out;
  out.seed = seed;
  out.source = {{"path", path}};
  out.name = std::filesystem::path(path).stem().string();

  if (any_text) {
    // Vocabulary from the train portion only.
    std::map<std::string, std::size_t> freq;
    for (std::size_t i = 0; i < std::min(n_train, n); ++i)
      for (const auto& w : raw[order[i]].words) freq[w] += 1;
    for (const auto& [w, c] : freq)
      if (c >= opts.min_frequency) out.vocab.add(w);
    out.vocab_size = out.vocab.size();
  } else {
    std::size_t mx = 1;
    for (const auto& r : raw) {
      for (std::size_t id : r.int_tokens) mx = std::max(mx, id);
      for (std::size_t id : r.int_query) mx = std::max(mx, id);
    }
    out.vocab_size = mx + 1;
  }

  std::size_t max_label = 1;
  auto convert = [&](const RawExample& r) {
    Example e;
    if (any_text) {
      for (const auto& w : r.words) e.tokens.push_back(out.vocab.id_of(w));
      for (const auto& w : r.query_words) e.query_tokens.push_back(out.vocab.id_of(w));
    } else {
      e.tokens = r.int_tokens;
      e.query_tokens = r.int_query;
    }
    e.label = r.label;
    return e;
  };
  for (const auto& r : raw) max_label = std::max(max_label, r.label);
  out.num_classes = max_label + 1;

  for (std::size_t i = 0; i < n; ++i) {
    Example e = convert(raw[order[i]]);
    out.has_query = out.has_query || !e.query_tokens.empty();
    if (i < n_train)
      out.train.push_back(std::move(e));
    else if (i < n_train + n_val)
      out.validation.push_back(std::move(e));
    else
      out.test.push_back(std::move(e));
  }
  if (out.test.empty() && n >= 3) throw IngestError("test split is empty");
  return out;
}

struct GeneratorOptions {
  std::size_t num_classes = 2;
  std::size_t signals_per_class = 3;
  SplitFractions fractions;
};

// Sequences of uniform filler tokens with exactly one class-identifying
// signal token planted at a random position. The planted representation is
// the only information-bearing input by construction.
inline DatasetSplit generate_planted_token(std::size_t n, std::size_t t_len,
                                           std::size_t vocab_size, std::uint64_t seed,
                                           GeneratorOptions opts = {}) {
  if (t_len < 3) throw ConfigError("planted-token generator requires T >= 3");
  if (vocab_size < 10) throw ConfigError("planted-token generator requires |V| >= 10");
  if (n < 20) throw ConfigError("need at least 20 samples to split");
  const std::size_t n_signal = opts.num_classes * opts.signals_per_class;
  const std::size_t first_signal = 2;  // 0 = PAD, 1 = UNK stay reserved
  const std::size_t first_filler = first_signal + n_signal;
  if (first_filler + 2 > vocab_size)
    throw ConfigError("vocab too small for " + std::to_string(n_signal) + " signal tokens");

  Rng rng(seed);
  std::vector<Example> all;
  all.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.label = i % opts.num_classes;  // balanced by construction
    e.tokens.resize(t_len);
    for (auto& tok : e.tokens)
      tok = first_filler + static_cast<std::size_t>(rng.index(vocab_size - first_filler));
    const auto pos = static_cast<std::size_t>(rng.index(t_len));
    e.tokens[pos] = first_signal + e.label * opts.signals_per_class +
                    static_cast<std::size_t>(rng.index(opts.signals_per_class));
    e.signal_pos = static_cast<std::ptrdiff_t>(pos);
    all.push_back(std::move(e));
  }

  DatasetSplit out;
  out.vocab_size = vocab_size;
  out.num_classes = opts.num_classes;
  out.seed = seed;
  out.name = "planted_token";
  out.source = {{"generator", "planted_token"}, {"n", n},      {"T", t_len},
                {"vocab_size", vocab_size},     {"seed", seed}};
  detail::shuffle_and_partition(all, opts.fractions, rng, out);
  return out;
}

// Planted-token with labels flipped at a fixed rate, stratified per class so
// the label balance is preserved exactly. The mutual information between the
// signal class and the label is 1 - H_b(noise_rate) bits.
inline DatasetSplit generate_distractor_task(std::size_t n, std::size_t t_len,
                                             std::size_t vocab_size, double noise_rate,
                                             std::uint64_t seed, GeneratorOptions opts = {}) {
  if (noise_rate < 0.0 || noise_rate > 0.5)
    throw ConfigError("noise_rate must lie in [0, 0.5]");
  if (opts.num_classes != 2) throw ConfigError("distractor task is binary");
  DatasetSplit out = generate_planted_token(n, t_len, vocab_size, seed, opts);
  Rng rng(Rng::splitmix(seed ^ 0x6e6f697365ULL));

  auto flip_in = [&](std::vector<Example>& split) {
    // Index both classes before touching any label so a flipped example can
    // never be selected again.
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < split.size(); ++i) by_class[split[i].label].push_back(i);
    for (auto& idx : by_class) {
      rng.shuffle(idx);
      const auto flips = static_cast<std::size_t>(
          std::lround(noise_rate * static_cast<double>(idx.size())));
      for (std::size_t i = 0; i < flips; ++i) split[idx[i]].label ^= 1;
    }
  };
  flip_in(out.train);
  flip_in(out.validation);
  flip_in(out.test);

  out.name = "distractor";
  out.source["generator"] = "distractor";
  out.source["noise_rate"] = noise_rate;
  out.source["analytic_mi_bits"] = 1.0 - binary_entropy_bits(noise_rate);
  return out;
}

struct Batch {
  std::vector<std::vector<std::size_t>> tokens;  // padded to the batch max
  std::vector<Mask> mask;                        // true at real positions
  std::vector<std::size_t> labels;
  std::vector<const Example*> examples;
};

// Pad a slice of examples to the batch max length. PAD id is 0 and is never a
// real token, so the mask is recoverable from the matrix alone.
inline Batch make_batch(const std::vector<const Example*>& examples, std::size_t pad_id = 0) {
  Batch b;
  std::size_t max_len = 1;
  for (const auto* e : examples) max_len = std::max(max_len, e->tokens.size());
  for (const auto* e : examples) {
    std::vector<std::size_t> row(max_len, pad_id);
    Mask m(max_len, 0);
    for (std::size_t i = 0; i < e->tokens.size(); ++i) {
      row[i] = e->tokens[i];
      m[i] = 1;
    }
    b.tokens.push_back(std::move(row));
    b.mask.push_back(std::move(m));
    b.labels.push_back(e->label);
    b.examples.push_back(e);
  }
  return b;
}

inline std::vector<Batch> make_batches(const std::vector<Example>& examples,
                                       std::size_t batch_size,
                                       const std::vector<std::size_t>* order = nullptr,
                                       std::size_t pad_id = 0) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<Batch> out;
  std::vector<const Example*> cur;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const std::size_t idx = order ? (*order)[i] : i;
    cur.push_back(&examples[idx]);
    if (cur.size() == batch_size) {
      out.push_back(make_batch(cur, pad_id));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(make_batch(cur, pad_id));
  return out;
}

inline void save_jsonl(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot open '" + path + "' for writing");
  for (const auto& e : examples) {
    nlohmann::json j = {{"tokens", e.tokens}, {"label", e.label}};
    if (!e.query_tokens.empty()) j["query"] = e.query_tokens;
    if (e.signal_pos >= 0) j["signal_pos"] = e.signal_pos;
    f << j.dump() << "\n";
  }
}

// Write train/validation/test JSONL plus the manifest into a directory.
inline void save_dataset(const std::string& dir, const DatasetSplit& ds) {
  std::filesystem::create_directories(dir);
  save_jsonl(dir + "/train.jsonl", ds.train);
  save_jsonl(dir + "/validation.jsonl", ds.validation);
  save_jsonl(dir + "/test.jsonl", ds.test);
  std::ofstream f(dir + "/manifest.json");
  if (!f) throw ConfigError("cannot open manifest for writing");
  f << ds.manifest().dump(2) << "\n";
}

inline std::vector<Example> load_examples_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IngestError("cannot open '" + path + "'");
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      nlohmann::json j = nlohmann::json::parse(line);
      Example e;
      e.tokens = j.at("tokens").get<std::vector<std::size_t>>();
      e.label = j.at("label").get<std::size_t>();
      if (j.contains("query")) e.query_tokens = j.at("query").get<std::vector<std::size_t>>();
      e.signal_pos = j.value("signal_pos", std::ptrdiff_t{-1});
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception& e) {
      throw IngestError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// Load a directory previously written by save_dataset, without re-splitting.
inline DatasetSplit load_dataset(const std::string& dir) {
  std::ifstream f(dir + "/manifest.json");
  if (!f) throw IngestError("cannot open '" + dir + "/manifest.json'");
  nlohmann::json m;
  f >> m;
  DatasetSplit out;
  out.name = m.value("name", std::string("dataset"));
  out.source = m.value("source", nlohmann::json::object());
  out.seed = m.value("seed", std::uint64_t{0});
  out.vocab_size = m.at("vocab_size").get<std::size_t>();
  out.num_classes = m.at("num_classes").get<std::size_t>();
  out.has_query = m.value("has_query", false);
  out.train = load_examples_jsonl(dir + "/train.jsonl");
  out.validation = load_examples_jsonl(dir + "/validation.jsonl");
  out.test = load_examples_jsonl(dir + "/test.jsonl");
  return out;
}

}  // namespace attnmi
