#pragma once

// Neural cache baseline: past (hidden state, next token) pairs vote for the
// next token with weight exp(omega * <h_t, h_i>); the resulting distribution
// is linearly mixed with the model's own prediction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "dyneval/data.hpp"
#include "dyneval/error.hpp"
#include "dyneval/model.hpp"
#include "dyneval/report.hpp"

namespace dyneval {

struct CacheConfig {
  double omega = 1.0;
  std::size_t capacity = 10000;
  double interp = 0.1;  // gamma

  void validate() const {
    if (!(omega > 0.0)) throw ConfigError("cache: omega must be > 0");
    if (!(interp >= 0.0 && interp <= 1.0)) throw ConfigError("cache: interp must be in [0, 1]");
  }
};

template <typename T>
class CacheState {
 public:
  struct Entry {
    std::vector<T> hidden;
    std::size_t next_token;
  };

  explicit CacheState(std::size_t capacity) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<Entry>& entries() const { return entries_; }

  // Oldest entries are evicted first.
  void push(std::span<const T> hidden, std::size_t next_token) {
    if (capacity_ == 0) return;
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back({std::vector<T>(hidden.begin(), hidden.end()), next_token});
  }

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

template <typename T>
std::vector<T> cache_distribution(const CacheState<T>& cache, std::span<const T> h,
                                  double omega, std::size_t vocab_size) {
  if (cache.empty()) throw ValidationError("cache_distribution: empty cache");
  std::vector<double> score;
  score.reserve(cache.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& e : cache.entries()) {
    if (e.hidden.size() != h.size()) throw ShapeError("cache_distribution: hidden size mismatch");
    if (e.next_token >= vocab_size) throw ValidationError("cache_distribution: token out of range");
    double d = 0.0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      d += static_cast<double>(h[j]) * static_cast<double>(e.hidden[j]);
    }
    score.push_back(omega * d);
    mx = std::max(mx, score.back());
  }
  std::vector<double> acc(vocab_size, 0.0);
  double total = 0.0;
  std::size_t i = 0;
  for (const auto& e : cache.entries()) {
    const double w = std::exp(score[i++] - mx);
    acc[e.next_token] += w;
    total += w;
  }
  std::vector<T> out(vocab_size);
  for (std::size_t v = 0; v < vocab_size; ++v) out[v] = static_cast<T>(acc[v] / total);
  return out;
}

// Observer sees (step, mixed distribution, cache size before insertion).
template <typename T>
using CacheObserver = std::function<void(std::size_t, std::span<const T>, std::size_t)>;

// Scores the sequence token by token with fixed parameters. After token
// x_{t+1} is scored, (h_t, x_{t+1}) is stored. `report_segment_len` only
// groups tokens into report rows.
template <typename T>
EvalReport cache_evaluate(const ModelConfig& cfg, const ParamVector<T>& theta_g,
                          const TokenSequence& seq, const CacheConfig& ccfg,
                          std::size_t report_segment_len = 20,
                          const CacheObserver<T>& observer = {}) {
  ccfg.validate();
  auto stream = segments(seq, report_segment_len);
  CacheState<T> cache(ccfg.capacity);
  auto state = RnnState<T>::zeros(cfg, 1);
  const T keep = static_cast<T>(1.0 - ccfg.interp);
  const T gamma = static_cast<T>(ccfg.interp);
  EvalReport report;
  std::vector<double> losses;
  std::vector<T> mix(cfg.vocab_size);
  std::size_t step = 0;
  for (std::size_t s = 0; s < stream.size(); ++s) {
    const auto seg = stream[s];
    losses.clear();
    for (std::size_t t = 0; t < seg.inputs.size(); ++t, ++step) {
      auto pred = step_predict(cfg, theta_g, state, seg.inputs[t]);
      const auto h = pred.state.top_hidden();
      if (cache.empty()) {
        mix = pred.dist;
      } else {
        const auto pc = cache_distribution<T>(cache, h, ccfg.omega, cfg.vocab_size);
        for (std::size_t v = 0; v < mix.size(); ++v) mix[v] = keep * pred.dist[v] + gamma * pc[v];
      }
      if (observer) observer(step, mix, cache.size());
      const std::size_t target = seg.targets[t];
      losses.push_back(-std::log(static_cast<double>(mix[target])));
      cache.push(h, target);
      state = std::move(pred.state);
    }
    report.add_segment(seg.start, losses);
  }
  return report;
}

}  // namespace dyneval
