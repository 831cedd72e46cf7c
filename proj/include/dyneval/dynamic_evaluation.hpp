#pragma once

// Test-time adaptation of a trained model. The test sequence is cut into
// segments; each segment is scored with the current adapted parameters, then
// its gradient (truncated to the segment) moves the adapted parameters before
// the next segment is scored. Four update rules are provided:
//
//   TraditionalSgd     theta - eta*g                          (n = 1, no decay)
//   SgdGlobalPrior     theta - eta*g + lambda*(theta_g - theta)
//   RmsGlobalPrior     theta - eta*g/(sqrt(ms_g)+eps) + lambda*(theta_g - theta)
//   RmsRmsGlobalPrior  theta - eta*g/(sqrt(ms_g)+eps)
//                            + lambda*(theta_g - theta) .* rms_norm
//
// where ms_g holds training-set mean squared gradients and rms_norm is
// sqrt(ms_g) normalised to mean one, clipped at 1/lambda.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dyneval/data.hpp"
#include "dyneval/error.hpp"
#include "dyneval/model.hpp"
#include "dyneval/report.hpp"
#include "dyneval/train.hpp"

namespace dyneval {

enum class UpdateRule { TraditionalSgd, SgdGlobalPrior, RmsGlobalPrior, RmsRmsGlobalPrior };

inline bool needs_stats(UpdateRule r) {
  return r == UpdateRule::RmsGlobalPrior || r == UpdateRule::RmsRmsGlobalPrior;
}

inline std::string to_string(UpdateRule r) {
  switch (r) {
    case UpdateRule::TraditionalSgd: return "traditional";
    case UpdateRule::SgdGlobalPrior: return "sgd-prior";
    case UpdateRule::RmsGlobalPrior: return "rms-prior";
    case UpdateRule::RmsRmsGlobalPrior: return "rms-rms-prior";
  }
  return "?";
}

inline UpdateRule parse_update_rule(std::string_view s) {
  for (auto r : {UpdateRule::TraditionalSgd, UpdateRule::SgdGlobalPrior,
                 UpdateRule::RmsGlobalPrior, UpdateRule::RmsRmsGlobalPrior}) {
    if (s == to_string(r)) return r;
  }
  throw ConfigError("unknown update rule '" + std::string(s) + "'");
}

struct DynEvalConfig {
  UpdateRule rule = UpdateRule::RmsRmsGlobalPrior;
  double eta = 0.0;
  double lambda = 0.0;
  double epsilon = 1e-5;
  std::size_t segment_len = 20;

  void validate() const {
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be >= 0");
    if (!(lambda >= 0.0 && lambda < 1.0)) throw ConfigError("lambda must be in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (segment_len < 1) throw ConfigError("segment length must be >= 1");
  }

  // Traditional dynamic evaluation updates after every token without decay.
  DynEvalConfig effective() const {
    DynEvalConfig c = *this;
    if (c.rule == UpdateRule::TraditionalSgd) {
      c.segment_len = 1;
      c.lambda = 0.0;
    }
    return c;
  }

  bool operator==(const DynEvalConfig&) const = default;
};

// sqrt(ms_g) / mean(sqrt(ms_g)), clipped at 1/lambda. lambda == 0 disables
// the clip.
template <typename T>
std::vector<T> compute_rms_norm(std::span<const T> ms_g, double lambda) {
  if (!(lambda >= 0.0 && lambda < 1.0)) {
    throw ConfigError("compute_rms_norm: lambda must be in [0, 1)");
  }
  if (ms_g.empty()) throw ValidationError("compute_rms_norm: empty statistics");
  std::vector<double> root(ms_g.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < ms_g.size(); ++i) {
    if (!(ms_g[i] >= T(0))) throw ValidationError("compute_rms_norm: negative ms_g");
    root[i] = std::sqrt(static_cast<double>(ms_g[i]));
    sum += root[i];
  }
  const double mean = sum / static_cast<double>(ms_g.size());
  if (!(mean > 0.0)) {
    throw ValidationError("compute_rms_norm: all mean squared gradients are zero");
  }
  const double cap = lambda > 0.0 ? 1.0 / lambda : std::numeric_limits<double>::infinity();
  std::vector<T> out(ms_g.size());
  for (std::size_t i = 0; i < ms_g.size(); ++i) {
    out[i] = static_cast<T>(std::min(root[i] / mean, cap));
  }
  return out;
}

template <typename T>
std::vector<T> compute_rms_norm(const GradientStats<T>& stats, double lambda) {
  return compute_rms_norm<T>(stats.ms_g.values(), lambda);
}

// Elementwise update on raw spans; shared by full and sparse adaptation.
// `ms_g` may be empty for the SGD rules, `rms_norm` for all but the last rule.
template <typename T>
void apply_update_values(std::span<T> theta, std::span<const T> theta_g,
                         std::span<const T> grad, std::span<const T> ms_g,
                         std::span<const T> rms_norm, const DynEvalConfig& cfg) {
  const std::size_t n = theta.size();
  if (theta_g.size() != n || grad.size() != n) {
    throw ShapeError("apply_update: layout mismatch");
  }
  if (needs_stats(cfg.rule) && ms_g.size() != n) {
    throw ConfigError("apply_update: " + to_string(cfg.rule) +
                      " requires gradient statistics");
  }
  if (cfg.rule == UpdateRule::RmsRmsGlobalPrior && rms_norm.size() != n) {
    throw ConfigError("apply_update: rms-rms-prior requires rms_norm");
  }
  const T eta = static_cast<T>(cfg.eta);
  const T lambda = static_cast<T>(cfg.lambda);
  const T eps = static_cast<T>(cfg.epsilon);
  switch (cfg.rule) {
    case UpdateRule::TraditionalSgd:
      for (std::size_t i = 0; i < n; ++i) theta[i] = theta[i] - eta * grad[i];
      break;
    case UpdateRule::SgdGlobalPrior:
      for (std::size_t i = 0; i < n; ++i) {
        theta[i] = theta[i] - eta * grad[i] + lambda * (theta_g[i] - theta[i]);
      }
      break;
    case UpdateRule::RmsGlobalPrior:
      for (std::size_t i = 0; i < n; ++i) {
        const T step = grad[i] / (std::sqrt(ms_g[i]) + eps);
        theta[i] = theta[i] - eta * step + lambda * (theta_g[i] - theta[i]);
      }
      break;
    case UpdateRule::RmsRmsGlobalPrior:
      for (std::size_t i = 0; i < n; ++i) {
        const T step = grad[i] / (std::sqrt(ms_g[i]) + eps);
        theta[i] = theta[i] - eta * step +
                   lambda * (theta_g[i] - theta[i]) * rms_norm[i];
      }
      break;
  }
}

// Adapted parameters for one evaluation pass. theta_g and stats are borrowed
// and must outlive the state.
template <typename T>
struct DynEvalState {
  ParamVector<T> theta_l;
  const ParamVector<T>* theta_g = nullptr;
  const GradientStats<T>* stats = nullptr;
  RnnState<T> rnn_state;
  std::size_t segment_index = 0;
  std::vector<T> rms_norm;
};

template <typename T>
DynEvalState<T> make_state(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                           const GradientStats<T>* stats, const DynEvalConfig& dcfg) {
  dcfg.validate();
  const auto eff = dcfg.effective();
  if (needs_stats(eff.rule)) {
    if (stats == nullptr || stats->ms_g.empty()) {
      throw ConfigError(to_string(eff.rule) + " requires gradient statistics");
    }
    if (!stats->ms_g.same_layout(theta_g)) {
      throw ShapeError("gradient statistics layout does not match parameters");
    }
  }
  DynEvalState<T> s;
  s.theta_l = theta_g;
  s.theta_g = &theta_g;
  s.stats = stats;
  s.rnn_state = RnnState<T>::zeros(cfg, 1);
  if (eff.rule == UpdateRule::RmsRmsGlobalPrior) s.rms_norm = compute_rms_norm(*stats, eff.lambda);
  return s;
}

template <typename T>
void apply_update(DynEvalState<T>& state, const ParamVector<T>& grad,
                  const DynEvalConfig& cfg) {
  if (!grad.same_layout(state.theta_l)) throw ShapeError("apply_update: layout mismatch");
  const auto eff = cfg.effective();
  std::span<const T> ms;
  if (needs_stats(eff.rule)) {
    if (state.stats == nullptr) {
      throw ConfigError(to_string(eff.rule) + " requires gradient statistics");
    }
    ms = state.stats->ms_g.values();
  }
  if (eff.rule == UpdateRule::RmsRmsGlobalPrior && state.rms_norm.empty()) {
    state.rms_norm = compute_rms_norm(*state.stats, eff.lambda);
  }
  apply_update_values<T>(state.theta_l.values(), state.theta_g->values(),
                         grad.values(), ms, state.rms_norm, eff);
  ++state.segment_index;
}

enum class EvalEvent { Score, Update };
using EvalObserver = std::function<void(EvalEvent, std::size_t segment)>;

template <typename T>
EvalReport static_evaluate(const ModelConfig& cfg, const ParamVector<T>& theta,
                           const TokenSequence& seq, std::size_t segment_len = 20) {
  EvalReport report;
  auto stream = segments(seq, segment_len);
  auto state = RnnState<T>::zeros(cfg, 1);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const auto seg = stream[i];
    auto fwd = forward_segment(cfg, theta, state, seg.inputs, seg.targets);
    report.add_segment(seg.start, fwd.token_losses);
    state = std::move(fwd.state);
  }
  return report;
}

namespace detail {

template <typename T>
bool params_finite(const ParamVector<T>& p) {
  return all_finite<T>(p.values());
}

// Scores each segment with the current adapted parameters and then adapts on
// it. When `update_after_last` is false the final (useless) update is skipped.
template <typename T>
void adapt_over(const ModelConfig& cfg, DynEvalState<T>& state,
                const TokenSequence& seq, const DynEvalConfig& dcfg,
                bool update_after_last, EvalReport* report,
                const EvalObserver& observer) {
  const auto eff = dcfg.effective();
  auto stream = segments(seq, eff.segment_len);
  for (std::size_t i = 0; i < stream.size(); ++i) {
    const auto seg = stream[i];
    auto fwd = forward_segment(cfg, state.theta_l, state.rnn_state, seg.inputs,
                               seg.targets);
    if (!std::isfinite(fwd.loss_sum)) {
      throw DivergenceError("dynamic evaluation loss is not finite", i);
    }
    if (report) report->add_segment(seg.start, fwd.token_losses);
    if (observer) observer(EvalEvent::Score, i);
    if (i + 1 < stream.size() || update_after_last) {
      auto grad = backward_segment(fwd.tape);
      const T inv = static_cast<T>(1.0 / static_cast<double>(seg.targets.size()));
      for (auto& g : grad.values()) g *= inv;
      apply_update(state, grad, eff);
      if (!params_finite(state.theta_l)) {
        throw DivergenceError("adapted parameters are not finite", i);
      }
      if (observer) observer(EvalEvent::Update, i);
    }
    state.rnn_state = std::move(fwd.state);
  }
}

}  // namespace detail

// Gradients are of the segment's mean per-token loss. Recurrent state values
// carry across segment boundaries.
template <typename T>
EvalReport dynamic_evaluate(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                            const GradientStats<T>* stats, const TokenSequence& seq,
                            const DynEvalConfig& dcfg,
                            const EvalObserver& observer = {}) {
  auto state = make_state(cfg, theta_g, stats, dcfg);
  EvalReport report;
  detail::adapt_over(cfg, state, seq, dcfg, false, &report, observer);
  return report;
}

struct TuneRow {
  DynEvalConfig config;
  double loss_nats = 0.0;  // total over the validation sequence
  bool diverged = false;
  std::string message;
};

struct TuneResult {
  DynEvalConfig best;
  std::vector<TuneRow> table;
};

// Each grid entry starts from theta_g. Picks the lowest total loss, breaking
// ties by smaller eta and then smaller lambda.
template <typename T>
TuneResult tune_hyperparams(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                            const GradientStats<T>* stats,
                            const TokenSequence& valid,
                            std::span<const DynEvalConfig> grid) {
  if (grid.empty()) throw ConfigError("tune_hyperparams: empty grid");
  TuneResult res;
  std::optional<std::size_t> best;
  for (const auto& c : grid) {
    TuneRow row{c, 0.0, false, {}};
    try {
      row.loss_nats = dynamic_evaluate(cfg, theta_g, stats, valid, c).total_nats();
      if (!std::isfinite(row.loss_nats)) {
        row.diverged = true;
        row.message = "non-finite loss";
      }
    } catch (const DivergenceError& e) {
      row.diverged = true;
      row.message = e.what();
    }
    res.table.push_back(row);
    if (row.diverged) continue;
    const std::size_t idx = res.table.size() - 1;
    if (!best) {
      best = idx;
      continue;
    }
    const auto& b = res.table[*best];
    const bool better =
        row.loss_nats < b.loss_nats ||
        (row.loss_nats == b.loss_nats &&
         (c.eta < b.config.eta || (c.eta == b.config.eta && c.lambda < b.config.lambda)));
    if (better) best = idx;
  }
  if (!best) {
    std::string msg = "tune_hyperparams: every configuration diverged:";
    for (const auto& r : res.table) {
      msg += "\n  rule=" + to_string(r.config.rule) + " eta=" + format_real(r.config.eta) +
             " lambda=" + format_real(r.config.lambda) + ": " + r.message;
    }
    throw DivergenceError(msg, 0);
  }
  res.best = res.table[*best].config;
  return res;
}

// Adaptation state after reading a conditioning sequence, ready to generate.
template <typename T>
struct SamplerState {
  DynEvalState<T> dyn;
  std::size_t last_token = 0;
};

template <typename T>
SamplerState<T> condition_sampler(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                                  const GradientStats<T>* stats,
                                  const TokenSequence& conditioning,
                                  const DynEvalConfig& dcfg) {
  if (conditioning.empty()) throw ValidationError("sampling: empty conditioning");
  SamplerState<T> s{make_state(cfg, theta_g, stats, dcfg), conditioning.ids.back()};
  if (conditioning.size() >= 2) {
    detail::adapt_over(cfg, s.dyn, conditioning, dcfg, true, nullptr, {});
  }
  return s;
}

// Samples one segment at a time with frozen adapted parameters, then adapts on
// the sampled segment as if it were observed data.
template <typename T>
std::vector<std::size_t> continue_sampling(const ModelConfig& cfg, SamplerState<T>& s,
                                           std::size_t length, const DynEvalConfig& dcfg,
                                           Rng& rng) {
  if (length < 1) throw ValidationError("sampling: length must be >= 1");
  const auto eff = dcfg.effective();
  std::vector<std::size_t> out;
  out.reserve(length);
  std::vector<std::size_t> inputs, targets;
  while (out.size() < length) {
    const std::size_t n = std::min(eff.segment_len, length - out.size());
    inputs.clear();
    targets.clear();
    RnnState<T> rnn = s.dyn.rnn_state;
    std::size_t prev = s.last_token;
    for (std::size_t t = 0; t < n; ++t) {
      auto pred = step_predict(cfg, s.dyn.theta_l, rnn, prev);
      const std::size_t tok = categorical_sample<T>(pred.dist, rng);
      inputs.push_back(prev);
      targets.push_back(tok);
      out.push_back(tok);
      rnn = std::move(pred.state);
      prev = tok;
    }
    s.last_token = prev;
    if (out.size() == length) {
      s.dyn.rnn_state = std::move(rnn);
      break;
    }
    auto fwd = forward_segment(cfg, s.dyn.theta_l, s.dyn.rnn_state, inputs, targets);
    auto grad = backward_segment(fwd.tape);
    const T inv = static_cast<T>(1.0 / static_cast<double>(n));
    for (auto& g : grad.values()) g *= inv;
    apply_update(s.dyn, grad, eff);
    if (!detail::params_finite(s.dyn.theta_l)) {
      throw DivergenceError("adapted parameters are not finite during sampling",
                            s.dyn.segment_index);
    }
    s.dyn.rnn_state = std::move(fwd.state);
  }
  return out;
}

template <typename T>
std::vector<std::size_t> dynamic_sample(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                                        const GradientStats<T>* stats,
                                        const TokenSequence& conditioning,
                                        std::size_t length, const DynEvalConfig& dcfg,
                                        Rng& rng) {
  if (length < 1) throw ValidationError("sampling: length must be >= 1");
  auto s = condition_sampler(cfg, theta_g, stats, conditioning, dcfg);
  return continue_sampling(cfg, s, length, dcfg, rng);
}

// Samples from fixed parameters after reading the conditioning sequence.
template <typename T>
std::vector<std::size_t> static_sample(const ModelConfig& cfg, const ParamVector<T>& theta,
                                       const TokenSequence& conditioning,
                                       std::size_t length, Rng& rng) {
  if (conditioning.empty()) throw ValidationError("sampling: empty conditioning");
  if (length < 1) throw ValidationError("sampling: length must be >= 1");
  auto rnn = RnnState<T>::zeros(cfg, 1);
  if (conditioning.size() >= 2) {
    std::span<const std::size_t> ids(conditioning.ids);
    auto fwd = forward_segment(cfg, theta, rnn, ids.first(ids.size() - 1),
                               ids.subspan(1));
    rnn = std::move(fwd.state);
  }
  std::size_t prev = conditioning.ids.back();
  std::vector<std::size_t> out;
  out.reserve(length);
  for (std::size_t t = 0; t < length; ++t) {
    auto pred = step_predict(cfg, theta, rnn, prev);
    prev = categorical_sample<T>(pred.dist, rng);
    out.push_back(prev);
    rnn = std::move(pred.state);
  }
  return out;
}

}  // namespace dyneval
