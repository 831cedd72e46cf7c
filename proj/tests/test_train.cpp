#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dyneval/dyneval.hpp"

using namespace dyneval;

namespace {

TokenSequence alternating(std::size_t n) {
  TokenSequence s;
  s.vocab_size = 2;
  for (std::size_t i = 0; i < n; ++i) s.ids.push_back(i % 2);
  return s;
}

TokenSequence toy_text(std::size_t chars, std::uint64_t seed, Vocab* vocab_out = nullptr) {
  synth::Language lang(synth::english_like(), 11, 200);
  Rng rng(seed);
  auto text = lang.corpus(rng, chars);
  auto vocab = build_vocab(text, VocabMode::Char);
  if (vocab_out) *vocab_out = vocab;
  return encode(text, vocab);
}

ParamVector<float> vec_of(std::vector<float> v) {
  auto layout = std::make_shared<Layout>();
  layout->add("x", 1, v.size());
  return ParamVector<float>(layout, std::move(v));
}

}  // namespace

TEST(Clip, ScalesDownLargeNorm) {
  auto g = clip_gradient(vec_of({6, 8}), 5.0);  // norm 10
  EXPECT_FLOAT_EQ(g[0], 3.0f);
  EXPECT_FLOAT_EQ(g[1], 4.0f);
  EXPECT_NEAR(l2_norm<float>(g.values()), 5.0, 1e-6);
}

TEST(Clip, UnderThresholdAndZeroUnchanged) {
  const auto small = vec_of({0, 3});
  EXPECT_EQ(clip_gradient(small, 5.0), small);
  const auto zero = vec_of({0, 0, 0});
  EXPECT_EQ(clip_gradient(zero, 5.0), zero);
}

TEST(Train, ToyLossDecreases) {
  const ModelConfig cfg{2, 4, 8, 1, 1.0};
  Rng rng(1);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.unroll_length = 10;
  tc.learning_rate = 0.5;
  const auto res = train(cfg, init_model<float>(cfg, rng), alternating(1001), tc);
  ASSERT_EQ(res.epoch_losses.size(), 2u);
  EXPECT_LT(res.epoch_losses[1], res.epoch_losses[0]);
}

TEST(Train, ZeroLearningRateLeavesParams) {
  const ModelConfig cfg{2, 3, 5, 2, 0.8};
  Rng rng(2);
  const auto p = init_model<float>(cfg, rng);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.unroll_length = 5;
  tc.learning_rate = 0.0;
  EXPECT_EQ(train(cfg, p, alternating(101), tc).params, p);
}

TEST(Train, Deterministic) {
  const ModelConfig cfg{2, 3, 5, 1, 0.8};
  Rng r1(3), r2(3);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.unroll_length = 5;
  const auto a = train(cfg, init_model<float>(cfg, r1), alternating(301), tc);
  const auto b = train(cfg, init_model<float>(cfg, r2), alternating(301), tc);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
}

TEST(Train, RequiresEnoughData) {
  const ModelConfig cfg{2, 3, 5, 1, 1.0};
  Rng rng(4);
  TrainConfig tc;
  tc.batch_size = 4;
  tc.unroll_length = 10;
  EXPECT_THROW(train(cfg, init_model<float>(cfg, rng), alternating(40), tc), ValidationError);
  tc.learning_rate = -1;
  EXPECT_THROW(train(cfg, init_model<float>(cfg, rng), alternating(400), tc), ConfigError);
}

TEST(Train, DivergenceIsReported) {
  const ModelConfig cfg{2, 3, 5, 1, 1.0};
  Rng rng(5);
  auto p = init_model<float>(cfg, rng);
  p.group("out.w")[0] = NAN;
  TrainConfig tc;
  tc.batch_size = 2;
  tc.unroll_length = 5;
  EXPECT_THROW(train(cfg, p, alternating(101), tc), DivergenceError);
}

TEST(BatchPlan, ContiguousStreams) {
  TokenSequence s;
  s.vocab_size = 100;
  for (std::size_t i = 0; i < 23; ++i) s.ids.push_back(i);
  BatchPlan plan(s, 2, 5);  // streams of 11: [0..10], [11..21]
  EXPECT_EQ(plan.num_chunks(), 2u);
  std::vector<std::size_t> in, tg;
  plan.chunk(1, in, tg);
  EXPECT_EQ(in, (std::vector<std::size_t>{5, 16, 6, 17, 7, 18, 8, 19, 9, 20}));
  EXPECT_EQ(tg, (std::vector<std::size_t>{6, 17, 7, 18, 8, 19, 9, 20, 10, 21}));
}

TEST(MsG, ScalarExample) {
  auto layout = std::make_shared<Layout>();
  layout->add("x", 1, 1);
  MsAccumulator<double> acc(layout);
  const std::vector<double> g1{1.0}, g2{3.0};
  acc.add(g1);
  acc.add(g2);
  const auto s = acc.finish(8);
  EXPECT_DOUBLE_EQ(s.ms_g[0], 5.0);
  EXPECT_EQ(s.num_batches, 2u);
  EXPECT_EQ(s.batch_size_used, 8u);
}

TEST(MsG, ZeroGradientsAndDuplication) {
  auto layout = std::make_shared<Layout>();
  layout->add("x", 1, 3);
  MsAccumulator<double> zeros(layout);
  const std::vector<double> z{0, 0, 0};
  zeros.add(z);
  zeros.add(z);
  const auto zs = zeros.finish(1);
  for (double v : zs.ms_g.values()) EXPECT_EQ(v, 0.0);

  Rng rng(1);
  std::vector<std::vector<double>> grads(5, std::vector<double>(3));
  for (auto& g : grads)
    for (auto& v : g) v = rng.uniform(-2, 2);
  MsAccumulator<double> once(layout), twice(layout);
  for (const auto& g : grads) {
    once.add(g);
    twice.add(g);
    twice.add(g);
  }
  const auto a = once.finish(1), b = twice.finish(1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.ms_g[i], b.ms_g[i], 1e-15);
  EXPECT_THROW(MsAccumulator<double>(layout).finish(1), ValidationError);
}

TEST(MsG, MatchesPerBatchOracleAndFreezesParams) {
  Vocab vocab;
  const auto data = toy_text(3000, 1, &vocab);
  const ModelConfig cfg{vocab.size(), 4, 6, 1, 1.0};
  Rng rng(2);
  const auto p = init_model<double>(cfg, rng);
  const auto before = p;
  const auto stats = collect_ms_g(cfg, p, data, 4, 25);
  EXPECT_EQ(p, before);

  // Oracle: squared mean-loss gradient of each chunk, averaged.
  const BatchPlan plan(data, 4, 25);
  std::vector<double> sum(p.size(), 0.0);
  auto state = RnnState<double>::zeros(cfg, 4);
  std::vector<std::size_t> in, tg;
  for (std::size_t k = 0; k < plan.num_chunks(); ++k) {
    plan.chunk(k, in, tg);
    auto fwd = forward_segment(cfg, p, state, in, tg);
    const auto g = backward_segment(fwd.tape);
    for (std::size_t i = 0; i < p.size(); ++i) sum[i] += std::pow(g[i] / 100.0, 2);
    state = fwd.state;
  }
  EXPECT_EQ(stats.num_batches, plan.num_chunks());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double want = sum[i] / static_cast<double>(plan.num_chunks());
    EXPECT_NEAR(stats.ms_g[i], want, 1e-12 * (1 + want));
    EXPECT_GE(stats.ms_g[i], 0.0);
  }
}

TEST(MsG, LargerBatchesGiveSmallerMedian) {
  Vocab vocab;
  const auto data = toy_text(20000, 3, &vocab);
  const ModelConfig cfg{vocab.size(), 8, 16, 1, 1.0};
  Rng rng(4);
  TrainConfig tc;
  tc.batch_size = 8;
  tc.unroll_length = 20;
  tc.learning_rate = 2.0;
  tc.clip_norm = 1.0;
  const auto p = train(cfg, init_model<float>(cfg, rng), data, tc).params;
  auto median = [](const GradientStats<float>& s) {
    std::vector<float> v(s.ms_g.values().begin(), s.ms_g.values().end());
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
    return v[v.size() / 2];
  };
  const auto small = collect_ms_g(cfg, p, data, 1, 20);
  const auto large = collect_ms_g(cfg, p, data, 16, 20);
  EXPECT_LT(median(large), median(small));
}
