#include <gtest/gtest.h>

#include <vector>

#include "dyneval/dyneval.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

using namespace dyneval;

namespace {

SparseConfig sparse(std::size_t h, UpdateRule rule, double eta, double lambda,
                    SubsetRule subset = SubsetRule::FirstH) {
  SparseConfig s;
  s.adapt_units = h;
  s.subset_rule = subset;
  s.update.rule = rule;
  s.update.eta = eta;
  s.update.lambda = lambda;
  return s;
}

ParamVector<double> random_params(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  ParamVector<double> p(model_layout(cfg));
  for (auto& v : p.values()) v = rng.uniform(-0.5, 0.5);
  return p;
}

TokenSequence random_seq(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenSequence s;
  s.vocab_size = vocab;
  for (std::size_t i = 0; i < n; ++i) s.ids.push_back(rng.below(vocab));
  return s;
}

}  // namespace

TEST(InitAdaptation, ParameterCounts) {
  const ModelConfig big{10, 4, 2800, 1, 1.0};
  Rng rng(1);
  const auto a = init_adaptation<float>(sparse(500, UpdateRule::SgdGlobalPrior, 0, 0), big, rng);
  EXPECT_EQ(a.parameter_count(), 250000u);
  for (float v : a.m.values()) EXPECT_EQ(v, 0.0f);
  const ModelConfig small{10, 4, 8, 1, 1.0};
  EXPECT_EQ(init_adaptation<float>(sparse(1, UpdateRule::SgdGlobalPrior, 0, 0), small, rng)
                .parameter_count(),
            1u);
}

TEST(InitAdaptation, SubsetRules) {
  const ModelConfig cfg{10, 4, 20, 1, 1.0};
  Rng rng(1);
  const auto first = init_adaptation<float>(sparse(3, UpdateRule::SgdGlobalPrior, 0, 0), cfg, rng);
  EXPECT_EQ(first.subset, (std::vector<std::size_t>{0, 1, 2}));

  const auto rnd = sparse(6, UpdateRule::SgdGlobalPrior, 0, 0, SubsetRule::SeededRandom);
  Rng a(5), b(5), c(6);
  const auto sa = init_adaptation<float>(rnd, cfg, a).subset;
  EXPECT_EQ(sa, init_adaptation<float>(rnd, cfg, b).subset);
  EXPECT_NE(sa, init_adaptation<float>(rnd, cfg, c).subset);
  EXPECT_EQ(sa.size(), 6u);
  for (std::size_t i = 1; i < sa.size(); ++i) EXPECT_LT(sa[i - 1], sa[i]);
  EXPECT_LT(sa.back(), 20u);
}

TEST(InitAdaptation, TooManyUnitsRejected) {
  const ModelConfig cfg{10, 4, 8, 1, 1.0};
  Rng rng(1);
  EXPECT_THROW(init_adaptation<float>(sparse(9, UpdateRule::SgdGlobalPrior, 0, 0), cfg, rng),
               ValidationError);
  EXPECT_THROW(init_adaptation<float>(sparse(0, UpdateRule::SgdGlobalPrior, 0, 0), cfg, rng),
               ConfigError);
}

TEST(AdaptHidden, HandExample) {
  AdaptationMatrix<double> a;
  a.subset = {0, 1};
  a.m = ParamVector<double>(adaptation_layout(2), {0, 1, 0, 0});
  const std::vector<double> h{2, 3, 5};
  EXPECT_EQ(adapt_hidden<double>(a, h), (std::vector<double>{5, 3, 5}));
}

TEST(AdaptHidden, ZeroMatrixAndUntouchedUnits) {
  const ModelConfig cfg{10, 4, 12, 1, 1.0};
  Rng rng(3);
  auto a = init_adaptation<double>(sparse(5, UpdateRule::SgdGlobalPrior, 0, 0,
                                          SubsetRule::SeededRandom),
                                   cfg, rng);
  std::vector<double> h(12);
  for (auto& v : h) v = rng.uniform(-1, 1);
  EXPECT_EQ(adapt_hidden<double>(a, h), h);
  for (auto& v : a.m.values()) v = rng.uniform(-1, 1);
  const auto out = adapt_hidden<double>(a, h);
  for (std::size_t j = 0; j < 12; ++j) {
    const bool in = std::find(a.subset.begin(), a.subset.end(), j) != a.subset.end();
    if (!in) EXPECT_EQ(out[j], h[j]) << j;
  }
  EXPECT_THROW(adapt_hidden<double>(a, std::vector<double>(3, 0.0)), ShapeError);
}

TEST(SparseEvaluate, NullSettingsEqualStatic) {
  const auto& m = fixture::english_model();
  const auto seq = encode(fixture::english_text(1200, 3), m.vocab);
  const auto before = m.params;
  Rng rng(1);
  const auto run = sparse_dynamic_evaluate_run<float>(
      m.cfg, m.params, sparse(8, UpdateRule::SgdGlobalPrior, 0, 0), nullptr, seq, rng);
  EXPECT_EQ(run.report, static_evaluate(m.cfg, m.params, seq, 20));
  for (float v : run.adaptation.m.values()) EXPECT_EQ(v, 0.0f);
  EXPECT_EQ(m.params, before);
}

TEST(SparseEvaluate, FrozenBaseAndBookkeeping) {
  const auto& m = fixture::english_model();
  const auto train = encode(fixture::english_text(20000, 1), m.vocab);
  const auto seq = encode(fixture::english_text(1200, 3), m.vocab);
  const auto before = m.params;
  const auto scfg = sparse(8, UpdateRule::RmsRmsGlobalPrior, 3e-3, 0.01);
  Rng probe(2);
  const auto a0 = init_adaptation<float>(scfg, m.cfg, probe);
  const auto ms = collect_adapter_ms_g(m.cfg, m.params, a0, train, 8, 40);
  Rng rng(2);
  const auto run = sparse_dynamic_evaluate_run(m.cfg, m.params, scfg, &ms, seq, rng);
  EXPECT_EQ(m.params, before);
  EXPECT_EQ(run.updated_parameters, 64u);
  EXPECT_EQ(run.updates, run.report.segment_losses.size() - 1);
  bool moved = false;
  for (float v : run.adaptation.m.values()) moved |= v != 0.0f;
  EXPECT_TRUE(moved);
  const auto stat = static_evaluate(m.cfg, m.params, seq, 20);
  EXPECT_EQ(run.report.segment_losses[0], stat.segment_losses[0]);
  EXPECT_NE(run.report.segment_losses.back(), stat.segment_losses.back());
}

TEST(SparseEvaluate, MissingStatisticsIsConfigError) {
  const ModelConfig cfg{6, 3, 5, 1, 1.0};
  const auto p = random_params(cfg, 1);
  Rng rng(1);
  EXPECT_THROW(sparse_dynamic_evaluate<double>(cfg, p, sparse(2, UpdateRule::RmsGlobalPrior, 0.1, 0.1),
                                               nullptr, random_seq(50, 6, 2), rng),
               ConfigError);
}

// Finite differences of the segment loss with respect to M, against an
// independent reference that applies the adapter inside its own LSTM step.
TEST(SparseGradient, FiniteDifferenceOnM) {
  const ModelConfig cfg{7, 4, 6, 2, 1.0};
  const auto p = random_params(cfg, 5);
  Rng rng(6);
  const std::vector<std::size_t> subset{1, 3, 4};
  std::vector<double> m(9);
  for (auto& v : m) v = rng.uniform(-0.6, 0.6);
  const auto seq = random_seq(13, 7, 7);
  const std::vector<std::size_t> in(seq.ids.begin(), seq.ids.end() - 1);
  const std::vector<std::size_t> tg(seq.ids.begin() + 1, seq.ids.end());

  const HiddenAdapter<double> view{subset, m};
  ForwardOptions<double> opts;
  opts.adapter = &view;
  auto fwd = forward_segment(cfg, p, RnnState<double>::zeros(cfg, 1), in, tg, opts);
  const auto back = backward_segment(fwd.tape, BackwardOptions{false, true});
  ASSERT_EQ(back.adapter_m.size(), 9u);

  const auto ref = oracle::token_losses(cfg, p, oracle::zero_state(cfg), in, tg, subset, m);
  double total = 0;
  for (double l : ref) total += l;
  EXPECT_NEAR(fwd.loss_sum, total, 1e-10);

  const std::vector<double> analytic(back.adapter_m.begin(), back.adapter_m.end());
  std::vector<std::size_t> coords(9);
  for (std::size_t i = 0; i < 9; ++i) coords[i] = i;
  const auto res = oracle::finite_difference_check(
      m, analytic, coords, [&](const std::vector<double>& mm) {
        double s = 0;
        for (double l : oracle::token_losses(cfg, p, oracle::zero_state(cfg), in, tg, subset, mm)) s += l;
        return s;
      });
  EXPECT_EQ(res.checked, 9u);
  EXPECT_LT(res.max_rel_error, 1e-4) << "worst entry " << res.worst_index;
}

TEST(SparseEvaluate, ManySequencesIndependentOfThreadCount) {
  const ModelConfig cfg{6, 3, 8, 1, 1.0};
  const auto p = random_params(cfg, 1).cast<float>();
  std::vector<TokenSequence> seqs;
  for (std::uint64_t k = 0; k < 5; ++k) seqs.push_back(random_seq(90, 6, 100 + k));
  const auto scfg = sparse(4, UpdateRule::SgdGlobalPrior, 0.5, 0.05, SubsetRule::SeededRandom);
  const Rng rng(9);
  const auto one = sparse_dynamic_evaluate_many<float>(cfg, p, scfg, nullptr, seqs, rng, 1);
  const auto three = sparse_dynamic_evaluate_many<float>(cfg, p, scfg, nullptr, seqs, rng, 3);
  EXPECT_EQ(one, three);
  for (std::size_t k = 0; k < seqs.size(); ++k) {
    Rng local = rng.split(k);
    EXPECT_EQ(one[k], sparse_dynamic_evaluate<float>(cfg, p, scfg, nullptr, seqs[k], local));
  }
}
