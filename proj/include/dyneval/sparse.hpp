#pragma once

// Sparse dynamic evaluation: the base parameters stay frozen and only an
// H x H matrix M, applied to H units of the top layer's hidden state as
// h' = h + M h, is adapted. M starts at zero, so its "trained" value (the
// target of the decay prior) is the zero matrix.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <memory>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "dyneval/data.hpp"
#include "dyneval/dynamic_evaluation.hpp"
#include "dyneval/error.hpp"
#include "dyneval/model.hpp"
#include "dyneval/report.hpp"
#include "dyneval/train.hpp"

namespace dyneval {

enum class SubsetRule { FirstH, SeededRandom };

struct SparseConfig {
  std::size_t adapt_units = 1;  // H
  SubsetRule subset_rule = SubsetRule::FirstH;
  DynEvalConfig update;

  void validate(const ModelConfig& model) const {
    if (adapt_units < 1) throw ConfigError("sparse: adapt_units must be >= 1");
    if (adapt_units > model.hidden_dim) {
      throw ValidationError("sparse: adapt_units " + std::to_string(adapt_units) +
                            " exceeds hidden_dim " + std::to_string(model.hidden_dim));
    }
    update.validate();
  }
};

inline std::shared_ptr<const Layout> adaptation_layout(std::size_t units) {
  auto layout = std::make_shared<Layout>();
  layout->add("adapt.m", units, units);
  return layout;
}

template <typename T>
struct AdaptationMatrix {
  std::vector<std::size_t> subset;  // hidden-unit indices of the top layer
  ParamVector<T> m;                 // H x H, row-major

  std::size_t units() const { return subset.size(); }
  std::size_t parameter_count() const { return m.size(); }
  HiddenAdapter<T> view() const { return {subset, m.values()}; }
};

template <typename T>
AdaptationMatrix<T> init_adaptation(const SparseConfig& scfg, const ModelConfig& model,
                                    Rng& rng) {
  scfg.validate(model);
  const std::size_t h = scfg.adapt_units;
  AdaptationMatrix<T> a;
  if (scfg.subset_rule == SubsetRule::FirstH) {
    for (std::size_t i = 0; i < h; ++i) a.subset.push_back(i);
  } else {
    std::vector<std::size_t> all(model.hidden_dim);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    for (std::size_t i = 0; i < h; ++i) {
      std::swap(all[i], all[i + rng.below(all.size() - i)]);
    }
    a.subset.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(h));
    std::sort(a.subset.begin(), a.subset.end());
  }
  a.m = ParamVector<T>(adaptation_layout(h));
  return a;
}

template <typename T>
std::vector<T> adapt_hidden(const AdaptationMatrix<T>& a, std::span<const T> h) {
  for (auto s : a.subset) {
    if (s >= h.size()) throw ShapeError("adapt_hidden: subset index outside hidden vector");
  }
  std::vector<T> out(h.begin(), h.end());
  detail::apply_adapter(a.view(), std::span<T>(out));
  return out;
}

// Mean squared gradients of M over the training data with M = 0 and the base
// parameters frozen. Same batching as collect_ms_g.
template <typename T>
GradientStats<T> collect_adapter_ms_g(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                                      const AdaptationMatrix<T>& a,
                                      const TokenSequence& data, std::size_t batch_size,
                                      std::size_t unroll_length) {
  data.validate();
  const BatchPlan plan(data, batch_size, unroll_length);
  if (plan.num_chunks() == 0) throw ValidationError("collect_adapter_ms_g: zero batches");
  const ParamVector<T> zero(a.m.layout_ptr());
  const HiddenAdapter<T> view{a.subset, zero.values()};
  MsAccumulator<T> acc(zero.layout_ptr());
  auto state = RnnState<T>::zeros(cfg, batch_size);
  const T inv = static_cast<T>(1.0 / static_cast<double>(batch_size * unroll_length));
  std::vector<std::size_t> inputs, targets;
  for (std::size_t k = 0; k < plan.num_chunks(); ++k) {
    plan.chunk(k, inputs, targets);
    ForwardOptions<T> opts;
    opts.adapter = &view;
    auto fwd = forward_segment(cfg, theta_g, state, inputs, targets, opts);
    auto back = backward_segment(fwd.tape, BackwardOptions{false, true});
    for (auto& g : back.adapter_m) g *= inv;
    acc.add(back.adapter_m);
    state = std::move(fwd.state);
  }
  return acc.finish(batch_size);
}

template <typename T>
struct SparseRun {
  EvalReport report;
  AdaptationMatrix<T> adaptation;
  std::size_t updated_parameters = 0;  // entries touched by each update
  std::size_t updates = 0;
};

// Same segment loop as dynamic_evaluate, with gradients taken w.r.t. M only.
template <typename T>
SparseRun<T> sparse_dynamic_evaluate_run(const ModelConfig& cfg,
                                         const ParamVector<T>& theta_g,
                                         const SparseConfig& scfg,
                                         const GradientStats<T>* m_stats,
                                         const TokenSequence& seq, Rng& rng,
                                         const EvalObserver& observer = {}) {
  scfg.validate(cfg);
  const auto eff = scfg.update.effective();
  SparseRun<T> run;
  run.adaptation = init_adaptation<T>(scfg, cfg, rng);
  auto& a = run.adaptation;
  const ParamVector<T> prior(a.m.layout_ptr());

  std::span<const T> ms;
  std::vector<T> rms_norm;
  if (needs_stats(eff.rule)) {
    if (m_stats == nullptr || !m_stats->ms_g.same_layout(a.m)) {
      throw ConfigError(to_string(eff.rule) +
                        " requires adaptation-matrix gradient statistics of matching size");
    }
    ms = m_stats->ms_g.values();
    if (eff.rule == UpdateRule::RmsRmsGlobalPrior) rms_norm = compute_rms_norm(*m_stats, eff.lambda);
  }

  auto stream = segments(seq, eff.segment_len);
  auto state = RnnState<T>::zeros(cfg, 1);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const auto seg = stream[i];
    const auto view = a.view();
    ForwardOptions<T> opts;
    opts.adapter = &view;
    auto fwd = forward_segment(cfg, theta_g, state, seg.inputs, seg.targets, opts);
    if (!std::isfinite(fwd.loss_sum)) {
      throw DivergenceError("sparse dynamic evaluation loss is not finite", i);
    }
    run.report.add_segment(seg.start, fwd.token_losses);
    if (observer) observer(EvalEvent::Score, i);
    if (i + 1 < stream.size()) {
      auto back = backward_segment(fwd.tape, BackwardOptions{false, true});
      const T inv = static_cast<T>(1.0 / static_cast<double>(seg.targets.size()));
      for (auto& g : back.adapter_m) g *= inv;
      apply_update_values<T>(a.m.values(), prior.values(), back.adapter_m, ms, rms_norm, eff);
      if (!all_finite<T>(a.m.values())) {
        throw DivergenceError("adaptation matrix is not finite", i);
      }
      run.updated_parameters = back.adapter_m.size();
      ++run.updates;
      if (observer) observer(EvalEvent::Update, i);
    }
    state = std::move(fwd.state);
  }
  return run;
}

template <typename T>
EvalReport sparse_dynamic_evaluate(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                                   const SparseConfig& scfg,
                                   const GradientStats<T>* m_stats,
                                   const TokenSequence& seq, Rng& rng) {
  return sparse_dynamic_evaluate_run(cfg, theta_g, scfg, m_stats, seq, rng).report;
}

// Evaluates many sequences against one shared, read-only theta_g; each
// sequence owns its own adaptation matrix. Sequence k uses rng.split(k), so
// results do not depend on the number of worker threads.
template <typename T>
std::vector<EvalReport> sparse_dynamic_evaluate_many(
    const ModelConfig& cfg, const ParamVector<T>& theta_g, const SparseConfig& scfg,
    const GradientStats<T>* m_stats, std::span<const TokenSequence> seqs, const Rng& rng,
    std::size_t threads = 0) {
  std::vector<EvalReport> out(seqs.size());
  std::vector<std::exception_ptr> errors(seqs.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, std::max<std::size_t>(seqs.size(), 1));
  auto work = [&](std::size_t worker) {
    for (std::size_t k = worker; k < seqs.size(); k += threads) {
      try {
        Rng local = rng.split(k);
        out[k] = sparse_dynamic_evaluate(cfg, theta_g, scfg, m_stats, seqs[k], local);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 1; w < threads; ++w) pool.emplace_back(work, w);
    work(0);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace dyneval
