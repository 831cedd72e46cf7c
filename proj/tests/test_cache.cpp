#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "dyneval/dyneval.hpp"

using namespace dyneval;

namespace {

ParamVector<float> random_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ParamVector<float> p(model_layout(cfg));
  for (auto& v : p.values()) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  return p;
}

TokenSequence random_seq(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequence s;
  s.vocab_size = vocab;
  for (std::size_t i = 0; i < n; ++i) s.ids.push_back(rng.below(vocab));
  return s;
}

CacheConfig cache(double omega, double interp, std::size_t capacity) {
  CacheConfig c;
  c.omega = omega;
  c.interp = interp;
  c.capacity = capacity;
  return c;
}

}  // namespace

// Tokens: a = 0, b = 1.
TEST(CacheDistribution, SingleEntry) {
  CacheState<double> c(10);
  c.push(std::vector<double>{1, 0}, 1);
  const auto p = cache_distribution<double>(c, std::vector<double>{1, 0}, 1.0, 2);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
  EXPECT_DOUBLE_EQ(p[0], 0.0);
}

TEST(CacheDistribution, TwoEntries) {
  CacheState<double> c(10);
  c.push(std::vector<double>{1, 0}, 1);
  c.push(std::vector<double>{0, 1}, 0);
  const auto p = cache_distribution<double>(c, std::vector<double>{1, 0}, 1.0, 2);
  const double e = std::numbers::e;
  EXPECT_NEAR(p[1], e / (e + 1), 1e-12);
  EXPECT_NEAR(p[0], 1 / (e + 1), 1e-12);
}

TEST(CacheDistribution, SmallOmegaGivesCounts) {
  CacheState<double> c(10);
  Rng rng(2);
  const std::size_t tokens[] = {2, 0, 2, 2, 3};
  for (auto t : tokens) {
    std::vector<double> h(4);
    for (auto& v : h) v = rng.uniform(-1, 1);
    c.push(h, t);
  }
  const auto p = cache_distribution<double>(c, std::vector<double>{0.3, -0.2, 0.9, 0.1}, 1e-9, 5);
  const double want[] = {0.2, 0.0, 0.6, 0.2, 0.0};
  for (std::size_t v = 0; v < 5; ++v) EXPECT_NEAR(p[v], want[v], 1e-8);
}

TEST(CacheDistribution, Errors) {
  CacheState<double> c(3);
  EXPECT_THROW(cache_distribution<double>(c, std::vector<double>{1, 0}, 1.0, 2), ValidationError);
  c.push(std::vector<double>{1, 0, 0}, 0);
  EXPECT_THROW(cache_distribution<double>(c, std::vector<double>{1, 0}, 1.0, 2), ShapeError);
  EXPECT_THROW(cache(0.0, 0.1, 10).validate(), ConfigError);
  EXPECT_THROW(cache(1.0, 1.5, 10).validate(), ConfigError);
}

TEST(CacheState, FifoEviction) {
  CacheState<double> c(3);
  for (std::size_t t = 0; t < 5; ++t) {
    c.push(std::vector<double>{static_cast<double>(t)}, t);
    EXPECT_LE(c.size(), 3u);
  }
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.entries()[0].next_token, 2u);
  EXPECT_EQ(c.entries()[1].next_token, 3u);
  EXPECT_EQ(c.entries()[2].next_token, 4u);
  CacheState<double> none(0);
  none.push(std::vector<double>{1}, 0);
  EXPECT_TRUE(none.empty());
}

TEST(CacheEvaluate, DegenerateSettingsEqualStatic) {
  const ModelConfig cfg{9, 4, 10, 2, 1.0};
  const auto p = random_params(cfg, 1);
  const auto seq = random_seq(151, 9, 2);
  const auto stat = static_evaluate(cfg, p, seq, 20);
  EXPECT_EQ(cache_evaluate(cfg, p, seq, cache(2.0, 0.0, 1000)), stat);
  EXPECT_EQ(cache_evaluate(cfg, p, seq, cache(2.0, 0.3, 0)), stat);
}

TEST(CacheEvaluate, MixtureIsNormalisedAndInsertionFollowsScoring) {
  const ModelConfig cfg{9, 4, 10, 1, 1.0};
  const auto p = random_params(cfg, 3);
  const auto seq = random_seq(80, 9, 4);
  std::vector<std::size_t> sizes;
  const auto report = cache_evaluate<float>(
      cfg, p, seq, cache(1.5, 0.25, 30), 20,
      [&](std::size_t step, std::span<const float> mix, std::size_t size_before) {
        double s = 0;
        for (float v : mix) s += v;
        EXPECT_NEAR(s, 1.0, 1e-6) << "step " << step;
        sizes.push_back(size_before);
      });
  ASSERT_EQ(sizes.size(), 79u);
  for (std::size_t t = 0; t < sizes.size(); ++t) EXPECT_EQ(sizes[t], std::min<std::size_t>(t, 30));
  // Token one sees an empty cache and must be scored by the model alone.
  const auto stat = static_evaluate(cfg, p, seq, 20);
  EXPECT_EQ(report.token_losses[0], stat.token_losses[0]);
  EXPECT_NE(report.token_losses[5], stat.token_losses[5]);
}

// Independent per-step recomputation of the mixture loss.
TEST(CacheEvaluate, MatchesStepByStepOracle) {
  const ModelConfig cfg{7, 3, 6, 1, 1.0};
  Rng rng(5);
  ParamVector<double> p(model_layout(cfg));
  for (auto& v : p.values()) v = rng.uniform(-0.5, 0.5);
  const auto seq = random_seq(40, 7, 6);
  const double omega = 0.8, gamma = 0.3;
  const auto report = cache_evaluate(cfg, p, seq, cache(omega, gamma, 100), 10);

  auto state = RnnState<double>::zeros(cfg, 1);
  std::vector<std::pair<std::vector<double>, std::size_t>> store;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    auto pred = step_predict(cfg, p, state, seq.ids[t]);
    const auto h = pred.state.top_hidden();
    const std::size_t y = seq.ids[t + 1];
    double prob = pred.dist[y];
    if (!store.empty()) {
      double num = 0, den = 0;
      for (const auto& [hi, tok] : store) {
        double d = 0;
        for (std::size_t j = 0; j < h.size(); ++j) d += h[j] * hi[j];
        const double w = std::exp(omega * d);
        den += w;
        if (tok == y) num += w;
      }
      prob = (1 - gamma) * prob + gamma * num / den;
    }
    EXPECT_NEAR(report.token_losses[t], -std::log(prob), 1e-10) << "t=" << t;
    store.emplace_back(std::vector<double>(h.begin(), h.end()), y);
    state = pred.state;
  }
}

TEST(CacheEvaluate, HelpsOnRepeatedRareTokens) {
  // Model trained on uniform data; test text keeps repeating two tokens.
  const ModelConfig cfg{12, 6, 16, 1, 1.0};
  Rng rng(7);
  const auto train_data = random_seq(20000, 12, 8);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.unroll_length = 20;
  tc.learning_rate = 2.0;
  tc.clip_norm = 1.0;
  const auto p = train(cfg, init_model<float>(cfg, rng), train_data, tc).params;
  TokenSequence test;
  test.vocab_size = 12;
  for (int i = 0; i < 300; ++i) test.ids.push_back(i % 3 == 0 ? 4 : 9);
  const auto stat = static_evaluate(cfg, p, test, 20);
  const auto cached = cache_evaluate(cfg, p, test, cache(1.0, 0.5, 500));
  EXPECT_LT(cached.perplexity(), stat.perplexity());
}
