#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "reform/metrics.hpp"

using namespace reform;

namespace {

const Vocab& vocab() {
  static const Vocab v = Vocab::build(3);
  return v;
}

StructuredAnswer answer(Option o) {
  StructuredAnswer a;
  a.option = o;
  return a;
}

// Precision at every positive, found by counting the items ranked at or above
// it (higher score, or equal score earlier in input order).
double enumerated_ap(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::vector<std::pair<std::size_t, std::size_t>> rank_hits;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    std::size_t rank = 0, hits = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const bool above = s[j] > s[i] || (s[j] == s[i] && j <= i);
      rank += above;
      hits += above && y[j];
    }
    rank_hits.emplace_back(rank, hits);
  }
  std::sort(rank_hits.begin(), rank_hits.end());
  double sum = 0.0;
  for (const auto& [rank, hits] : rank_hits) sum += static_cast<double>(hits) / static_cast<double>(rank);
  return sum / static_cast<double>(rank_hits.size());
}

}  // namespace

TEST(Acc, Binary) {
  const std::vector<Prediction> preds = {answer(Option::A), answer(Option::B), std::nullopt, answer(Option::J)};
  const SampleLabel real;
  const SampleLabel fake{ImageClass::NoManip, TextClass::FullyRewritten, std::nullopt, {1}};
  const std::vector<SampleLabel> gts = {real, fake, real, real};
  EXPECT_DOUBLE_EQ(binary_acc(preds, gts), 0.5);
  EXPECT_THROW(binary_acc(std::vector<Prediction>{}, std::vector<SampleLabel>{}), std::invalid_argument);
}

TEST(Ap, WorkedExample) {
  const std::vector<double> s = {0.9, 0.8, 0.1};
  const std::vector<std::uint8_t> y = {1, 0, 1};
  EXPECT_DOUBLE_EQ(*average_precision(s, y), 5.0 / 6.0);
  EXPECT_FALSE(average_precision(s, std::vector<std::uint8_t>{0, 0, 0}));
}

TEST(Ap, MatchesEnumerationWithTies) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> size(1, 8), level(0, 4), bit(0, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(size(rng));
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = level(rng) * 0.25;
      y[i] = static_cast<std::uint8_t>(bit(rng));
    }
    const auto ap = average_precision(s, y);
    if (std::count(y.begin(), y.end(), 1) == 0) {
      EXPECT_FALSE(ap);
      continue;
    }
    ASSERT_TRUE(ap);
    EXPECT_EQ(*ap, enumerated_ap(s, y));
  }
}

TEST(Scores, OneHotAndUniform) {
  std::array<double, kNumOptions> p{};
  p[static_cast<std::size_t>(Option::F)] = 1.0;
  const ClassScoreVector s = scores_from_option_probs(p);
  EXPECT_DOUBLE_EQ(s[static_cast<std::size_t>(ImageClass::FaceSwap) - 1], 1.0);
  EXPECT_DOUBLE_EQ(s[4], 1.0);
  EXPECT_EQ(s[1] + s[2] + s[3], 0.0);

  p.fill(0.1);
  const ClassScoreVector u = scores_from_option_probs(p);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(u[k], 0.2, 1e-15);
  EXPECT_NEAR(u[4], 0.5, 1e-15);
}

TEST(Scores, LabelTargets) {
  const SampleLabel gt{ImageClass::WholeGenerated, TextClass::FullyRewritten, std::nullopt, {0}};
  const auto y = label_targets(gt);
  EXPECT_EQ(y, (std::array<std::uint8_t, kNumScoredLabels>{0, 0, 1, 0, 1}));
  EXPECT_EQ(label_targets(SampleLabel{}), (std::array<std::uint8_t, kNumScoredLabels>{}));
}

TEST(Miou, OnlyBoxedSamplesCount) {
  const SampleLabel face{ImageClass::FaceSwap, TextClass::NoManip, BBox(0.005, 0.005, 0.495, 0.495), {}};
  StructuredAnswer hit = answer(Option::B);
  hit.box = BinBox{{0, 0, 49, 49}};
  const std::vector<Prediction> preds = {hit, answer(Option::B), answer(Option::A)};
  const std::vector<SampleLabel> gts = {face, face, SampleLabel{}};
  EXPECT_NEAR(*miou(preds, gts), 0.5, 1e-12);
  EXPECT_FALSE(miou(std::vector<Prediction>{answer(Option::A)}, std::vector<SampleLabel>{SampleLabel{}}));
}

TEST(TokenPrecision, TwoOfThree) {
  TokenSeq caption;
  for (const char* w : {"minister", "city", "team", "crowd", "match", "leader"}) caption.push_back(vocab().id(w));
  const SampleLabel gt{ImageClass::NoManip, TextClass::FullyRewritten, std::nullopt, {1, 2}};
  StructuredAnswer pred = answer(Option::J);
  pred.fake_words = TokenSeq{vocab().id("city"), vocab().id("team"), vocab().id("leader")};
  const std::vector<Prediction> preds = {pred};
  const std::vector<SampleLabel> gts = {gt};
  const std::vector<TokenSeq> caps = {caption};
  EXPECT_DOUBLE_EQ(*token_precision(preds, gts, caps, vocab()), 2.0 / 3.0);
  pred.fake_words = TokenSeq{};
  EXPECT_FALSE(token_precision(std::vector<Prediction>{pred}, gts, caps, vocab()));
}

TEST(Report, AggregateAndEmptyDomains) {
  std::vector<ScoredSample> items(4);
  items[0].domain = 0;
  items[0].pred = answer(Option::A);
  items[1].domain = 0;
  items[1].label = SampleLabel{ImageClass::WholeGenerated, TextClass::NoManip, std::nullopt, {}};
  items[1].pred = answer(Option::D);
  items[1].scores = {0.0, 0.0, 0.9, 0.0, 0.0};
  items[2].domain = 1;
  items[2].pred = answer(Option::D);
  items[3].domain = 1;
  items[3].label = items[1].label;
  items[3].pred = answer(Option::D);
  items[3].scores = {0.0, 0.0, 0.1, 0.0, 0.0};
  items[2].scores = {0.0, 0.0, 0.5, 0.0, 0.0};
  const std::vector<int> expected = {0, 1, 2};
  const MetricsReport r = build_report(items, vocab(), false, expected);
  EXPECT_EQ(r.empty_domains, std::vector<int>{2});
  EXPECT_DOUBLE_EQ(r.domains.at(0).acc, 1.0);
  EXPECT_DOUBLE_EQ(r.domains.at(1).acc, 0.5);
  EXPECT_DOUBLE_EQ(r.aggregate.acc, 0.75);
  EXPECT_DOUBLE_EQ(*r.domains.at(0).map, 1.0);
  EXPECT_DOUBLE_EQ(*r.domains.at(1).map, 0.5);
  EXPECT_DOUBLE_EQ(*r.aggregate.map, 0.75);
  const std::string table = render_table(r);
  EXPECT_NE(table.find("warning: domain 2"), std::string::npos);
  EXPECT_TRUE(to_json(r).is_object());
}

TEST(EvalRun, FastAndExplainableAgree) {
  ModelConfig c;
  c.vocab_size = static_cast<int>(vocab().size());
  c.d_model = 16;
  c.n_heads = 2;
  c.n_reason_tokens = 4;
  c.ffn_width = 32;
  const ModelParams p = init_params(c, 3);
  const auto samples = generate(EnvConfig{}, vocab(), 12);
  const EvalOutput fast = eval_run(p, samples, vocab(), EvalMode::Fast);
  const EvalOutput full = eval_run(p, samples, vocab(), EvalMode::Explainable);
  EXPECT_EQ(fast.answers, full.answers);
  EXPECT_TRUE(fast.report == full.report);
  EXPECT_TRUE(fast.reasons.empty());
  EXPECT_EQ(full.reasons.size(), samples.size());
  EXPECT_EQ(to_json(fast.report).dump(), to_json(full.report).dump());
}
