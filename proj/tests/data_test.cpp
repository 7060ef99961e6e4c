#include "attnmi/data.hpp"

#include <gtest/gtest.h>

#include <fstream>

#include "attnmi/mi.hpp"

using namespace attnmi;

namespace {

std::string write_corpus(const std::string& name, const std::vector<std::string>& lines) {
  const std::string path = ::testing::TempDir() + "/" + name;
  std::ofstream f(path);
  for (const auto& l : lines) f << l << "\n";
  return path;
}

// Signal tokens occupy ids [2, 2 + classes*signals); recover the class of the
// planted token in a generated example.
std::size_t signal_class_of(const Example& e, std::size_t signals_per_class) {
  const auto id = e.tokens.at(static_cast<std::size_t>(e.signal_pos));
  return (id - 2) / signals_per_class;
}

std::vector<const Example*> all_examples(const DatasetSplit& ds) {
  std::vector<const Example*> out;
  for (const auto& e : ds.train) out.push_back(&e);
  for (const auto& e : ds.validation) out.push_back(&e);
  for (const auto& e : ds.test) out.push_back(&e);
  return out;
}

}  // namespace

TEST(LoadJsonl, TwoLineFileConservesClassCounts) {
  const auto path = write_corpus("two.jsonl", {R"({"text":"good movie","label":1})",
                                               R"({"text":"bad movie","label":0})"});
  DatasetSplit ds = load_jsonl(path, 1);
  const std::size_t total = ds.train.size() + ds.validation.size() + ds.test.size();
  EXPECT_EQ(total, 2u);
  std::size_t ones = 0;
  for (const auto* e : all_examples(ds)) ones += e->label;
  EXPECT_EQ(ones, 1u);
}

TEST(LoadJsonl, RareWordsMapToUnk) {
  std::vector<std::string> lines;
  for (int i = 0; i < 20; ++i)
    lines.push_back(R"({"text":"common words rare)" + std::to_string(i) + R"(","label":0})");
  const auto path = write_corpus("rare.jsonl", lines);
  DatasetSplit ds = load_jsonl(path, 7);
  // "common"/"words" occur 20x and get real ids; each "rareN" occurs once and
  // must map to UNK wherever it landed.
  for (const auto* e : all_examples(ds)) {
    ASSERT_EQ(e->tokens.size(), 3u);
    EXPECT_GE(e->tokens[0], 2u);
    EXPECT_GE(e->tokens[1], 2u);
    EXPECT_EQ(e->tokens[2], Vocabulary::kUnk);
  }
}

TEST(LoadJsonl, DeterministicReload) {
  std::vector<std::string> lines;
  for (int i = 0; i < 40; ++i)
    lines.push_back(R"({"text":"token)" + std::to_string(i % 7) + R"( filler","label":)" +
                    std::to_string(i % 2) + "}");
  const auto path = write_corpus("det.jsonl", lines);
  DatasetSplit a = load_jsonl(path, 99);
  DatasetSplit b = load_jsonl(path, 99);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].tokens, b.train[i].tokens);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
  }
  EXPECT_EQ(a.vocab.token_to_id, b.vocab.token_to_id);
}

TEST(LoadJsonl, ErrorsCarryLineNumbers) {
  const auto path = write_corpus("bad.jsonl", {R"({"text":"fine","label":0})", "{broken"});
  try {
    load_jsonl(path, 1);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  const auto empty = write_corpus("empty.jsonl", {});
  EXPECT_THROW(load_jsonl(empty, 1), IngestError);
  const auto no_label = write_corpus("nolabel.jsonl", {R"({"text":"x y"})"});
  EXPECT_THROW(load_jsonl(no_label, 1), IngestError);
}

TEST(LoadJsonl, IntegerTokenCorpus) {
  const auto path = write_corpus("ints.jsonl", {R"({"tokens":[3,4,5],"label":1})",
                                                R"({"tokens":[6,7],"label":0})",
                                                R"({"tokens":[2,9],"label":1})"});
  DatasetSplit ds = load_jsonl(path, 3);
  EXPECT_EQ(ds.vocab_size, 10u);  // max id 9
  const auto zero = write_corpus("zeros.jsonl", {R"({"tokens":[0,1],"label":0})"});
  EXPECT_THROW(load_jsonl(zero, 1), IngestError);
}

TEST(PlantedToken, EverySequenceHasExactlyOneSignal) {
  GeneratorOptions opts;
  DatasetSplit ds = generate_planted_token(200, 10, 40, 5, opts);
  const std::size_t n_signal = opts.num_classes * opts.signals_per_class;
  for (const auto* e : all_examples(ds)) {
    ASSERT_EQ(e->tokens.size(), 10u);
    std::size_t signals = 0;
    for (std::size_t t = 0; t < e->tokens.size(); ++t) {
      if (e->tokens[t] >= 2 && e->tokens[t] < 2 + n_signal) {
        ++signals;
        EXPECT_EQ(static_cast<std::ptrdiff_t>(t), e->signal_pos);
      }
    }
    EXPECT_EQ(signals, 1u);
    // Label is a deterministic function of the signal token (Bayes acc 1).
    EXPECT_EQ(signal_class_of(*e, opts.signals_per_class), e->label);
  }
}

TEST(PlantedToken, BalancedLabelsGiveOneBitOfSignalMi) {
  DatasetSplit ds = generate_planted_token(2000, 8, 30, 11);
  std::vector<std::size_t> cls, lbl;
  for (const auto* e : all_examples(ds)) {
    cls.push_back(signal_class_of(*e, 3));
    lbl.push_back(e->label);
  }
  EXPECT_NEAR(mutual_information_bits(cls, lbl), 1.0, 1e-9);
}

TEST(PlantedToken, ReproducibleBitForBit) {
  DatasetSplit a = generate_planted_token(100, 6, 25, 42);
  DatasetSplit b = generate_planted_token(100, 6, 25, 42);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].tokens, b.train[i].tokens);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
    EXPECT_EQ(a.train[i].signal_pos, b.train[i].signal_pos);
  }
  DatasetSplit c = generate_planted_token(100, 6, 25, 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size() && !differs; ++i)
    differs = a.train[i].tokens != c.train[i].tokens;
  EXPECT_TRUE(differs);
}

TEST(PlantedToken, Preconditions) {
  EXPECT_THROW(generate_planted_token(19, 10, 40, 1), ConfigError);
  EXPECT_THROW(generate_planted_token(100, 2, 40, 1), ConfigError);
  EXPECT_THROW(generate_planted_token(100, 10, 9, 1), ConfigError);
}

TEST(Distractor, ZeroNoiseMatchesPlantedFamily) {
  DatasetSplit p = generate_planted_token(100, 8, 30, 17);
  DatasetSplit d = generate_distractor_task(100, 8, 30, 0.0, 17);
  ASSERT_EQ(p.train.size(), d.train.size());
  for (std::size_t i = 0; i < p.train.size(); ++i) {
    EXPECT_EQ(p.train[i].tokens, d.train[i].tokens);
    EXPECT_EQ(p.train[i].label, d.train[i].label);
  }
}

TEST(Distractor, AnalyticMiMatchesPlugInEstimate) {
  const double noise = 0.11;
  DatasetSplit ds = generate_distractor_task(10000, 8, 30, noise, 23);
  std::vector<std::size_t> cls, lbl;
  for (const auto* e : all_examples(ds)) {
    cls.push_back(signal_class_of(*e, 3));
    lbl.push_back(e->label);
  }
  const double analytic = 1.0 - binary_entropy_bits(noise);
  EXPECT_NEAR(analytic, 0.5, 0.001);  // 1 - H_b(0.11) is about 0.5004
  EXPECT_NEAR(mutual_information_bits(cls, lbl), analytic, 0.05);
}

TEST(Distractor, FullNoiseDestroysSignal) {
  DatasetSplit ds = generate_distractor_task(10000, 8, 30, 0.5, 29);
  std::vector<std::size_t> cls, lbl;
  for (const auto* e : all_examples(ds)) {
    cls.push_back(signal_class_of(*e, 3));
    lbl.push_back(e->label);
  }
  EXPECT_LT(mutual_information_bits(cls, lbl), 0.01);
}

TEST(Distractor, LabelBalanceWithinTwoPercent) {
  for (double noise : {0.0, 0.11, 0.3}) {
    DatasetSplit ds = generate_distractor_task(2000, 8, 30, noise, 31);
    std::size_t ones = 0, total = 0;
    for (const auto* e : all_examples(ds)) {
      ones += e->label;
      ++total;
    }
    const double balance = static_cast<double>(ones) / static_cast<double>(total);
    EXPECT_NEAR(balance, 0.5, 0.02) << noise;
  }
}

TEST(Splits, FractionsWithinOnePercent) {
  DatasetSplit ds = generate_planted_token(5000, 8, 30, 37);
  const double n = 5000.0;
  EXPECT_NEAR(ds.train.size() / n, 0.8, 0.01);
  EXPECT_NEAR(ds.validation.size() / n, 0.1, 0.01);
  EXPECT_NEAR(ds.test.size() / n, 0.1, 0.01);
}

TEST(Batching, PaddingAndMask) {
  Example a, b;
  a.tokens = {5, 6, 7};
  a.label = 0;
  b.tokens = {8, 9, 10, 11, 12};
  b.label = 1;
  Batch batch = make_batch({&a, &b});
  ASSERT_EQ(batch.tokens[0].size(), 5u);
  EXPECT_EQ(batch.tokens[0][3], 0u);
  EXPECT_EQ(batch.tokens[0][4], 0u);
  std::size_t mask_sum = 0;
  for (const auto& m : batch.mask)
    for (auto v : m) mask_sum += v;
  EXPECT_EQ(mask_sum, 8u);  // total real tokens
}

TEST(Batching, ShuffledBatchingReproducible) {
  DatasetSplit ds = generate_planted_token(64, 6, 25, 41);
  auto shuffled_order = [&](std::uint64_t seed) {
    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);
    return order;
  };
  const auto o1 = shuffled_order(5), o2 = shuffled_order(5);
  EXPECT_EQ(o1, o2);
  auto b1 = make_batches(ds.train, 10, &o1);
  auto b2 = make_batches(ds.train, 10, &o2);
  ASSERT_EQ(b1.size(), b2.size());
  EXPECT_EQ(b1.size(), (ds.train.size() + 9) / 10);
  for (std::size_t i = 0; i < b1.size(); ++i) EXPECT_EQ(b1[i].tokens, b2[i].tokens);
}

TEST(Export, DatasetRoundTrip) {
  DatasetSplit ds = generate_distractor_task(60, 6, 25, 0.2, 43);
  const std::string dir = ::testing::TempDir() + "/ds_roundtrip";
  save_dataset(dir, ds);
  DatasetSplit back = load_dataset(dir);
  EXPECT_EQ(back.vocab_size, ds.vocab_size);
  EXPECT_EQ(back.num_classes, ds.num_classes);
  ASSERT_EQ(back.train.size(), ds.train.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    EXPECT_EQ(back.train[i].tokens, ds.train[i].tokens);
    EXPECT_EQ(back.train[i].label, ds.train[i].label);
    EXPECT_EQ(back.train[i].signal_pos, ds.train[i].signal_pos);
  }
  const auto manifest = ds.manifest();
  EXPECT_EQ(manifest.at("sizes").at("train").get<std::size_t>(), ds.train.size());
}
