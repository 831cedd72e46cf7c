#pragma once

// Plain SGD training of the base model and collection of training-set mean
// squared gradients (per parameter, over minibatches).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dyneval/data.hpp"
#include "dyneval/error.hpp"
#include "dyneval/model.hpp"

namespace dyneval {

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::size_t unroll_length = 50;
  double learning_rate = 1.0;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1 || batch_size < 1 || unroll_length < 1) {
      throw ConfigError("TrainConfig: counts must be >= 1");
    }
    if (!(learning_rate >= 0.0) || !(clip_norm > 0.0)) {
      throw ConfigError("TrainConfig: learning_rate >= 0 and clip_norm > 0");
    }
  }
};

// Splits a sequence into `batch` contiguous streams and walks them in lockstep
// in chunks of `unroll` steps. Only full chunks are produced.
class BatchPlan {
 public:
  BatchPlan(const TokenSequence& data, std::size_t batch, std::size_t unroll)
      : data_(&data), batch_(batch), unroll_(unroll) {
    if (batch < 1 || unroll < 1) throw ConfigError("BatchPlan: sizes must be >= 1");
    if (data.size() <= batch * unroll) {
      throw ValidationError("training data (" + std::to_string(data.size()) +
                            " tokens) must exceed batch_size x unroll_length (" +
                            std::to_string(batch * unroll) + ")");
    }
    stream_len_ = (data.size() - 1) / batch;
  }

  std::size_t batch() const { return batch_; }
  std::size_t unroll() const { return unroll_; }
  std::size_t num_chunks() const { return stream_len_ / unroll_; }

  // Time-major inputs/targets for chunk k.
  void chunk(std::size_t k, std::vector<std::size_t>& inputs,
             std::vector<std::size_t>& targets) const {
    inputs.resize(unroll_ * batch_);
    targets.resize(unroll_ * batch_);
    const std::size_t pos = k * unroll_;
    for (std::size_t t = 0; t < unroll_; ++t) {
      for (std::size_t b = 0; b < batch_; ++b) {
        const std::size_t at = b * stream_len_ + pos + t;
        inputs[t * batch_ + b] = data_->ids[at];
        targets[t * batch_ + b] = data_->ids[at + 1];
      }
    }
  }

 private:
  const TokenSequence* data_;
  std::size_t batch_;
  std::size_t unroll_;
  std::size_t stream_len_ = 0;
};

template <typename T>
double l2_norm(std::span<const T> v) {
  double s = 0.0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

template <typename T>
void clip_gradient_inplace(ParamVector<T>& g, double clip_norm) {
  if (!(clip_norm > 0.0)) throw ConfigError("clip_gradient: clip_norm must be > 0");
  const double norm = l2_norm<T>(g.values());
  if (norm > clip_norm) {
    const T scale = static_cast<T>(clip_norm / norm);
    for (auto& x : g.values()) x *= scale;
  }
}

template <typename T>
ParamVector<T> clip_gradient(ParamVector<T> g, double clip_norm) {
  clip_gradient_inplace(g, clip_norm);
  return g;
}

template <typename T>
struct TrainResult {
  ParamVector<T> params;
  std::vector<double> epoch_losses;  // mean nats per token, as recorded
};

template <typename T>
TrainResult<T> train(const ModelConfig& cfg, ParamVector<T> params,
                     const TokenSequence& data, const TrainConfig& tcfg,
                     const std::function<void(std::size_t, double)>& on_epoch = {}) {
  tcfg.validate();
  cfg.validate();
  data.validate();
  const BatchPlan plan(data, tcfg.batch_size, tcfg.unroll_length);
  const Rng base(tcfg.seed);
  const T lr = static_cast<T>(tcfg.learning_rate);
  const double tokens_per_chunk =
      static_cast<double>(tcfg.batch_size * tcfg.unroll_length);

  TrainResult<T> result;
  std::vector<std::size_t> inputs, targets;
  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    Rng dropout = base.split(epoch);
    auto state = RnnState<T>::zeros(cfg, tcfg.batch_size);
    double total = 0.0;
    for (std::size_t k = 0; k < plan.num_chunks(); ++k) {
      plan.chunk(k, inputs, targets);
      ForwardOptions<T> opts;
      if (cfg.dropout_keep < 1.0) opts.dropout_rng = &dropout;
      auto fwd = forward_segment(cfg, params, state, inputs, targets, opts);
      if (!std::isfinite(fwd.loss_sum)) {
        throw DivergenceError("training loss is not finite at epoch " +
                                  std::to_string(epoch) + ", batch " +
                                  std::to_string(k),
                              k);
      }
      total += fwd.loss_sum;
      auto grad = backward_segment(fwd.tape);
      const T inv = static_cast<T>(1.0 / tokens_per_chunk);
      for (auto& x : grad.values()) x *= inv;
      clip_gradient_inplace(grad, tcfg.clip_norm);
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
      state = std::move(fwd.state);
    }
    const double mean =
        total / (tokens_per_chunk * static_cast<double>(plan.num_chunks()));
    result.epoch_losses.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  result.params = std::move(params);
  return result;
}

template <typename T>
struct GradientStats {
  ParamVector<T> ms_g;
  std::size_t batch_size_used = 0;
  std::size_t num_batches = 0;
};

// Running mean of elementwise squared gradients, accumulated in double.
template <typename T>
class MsAccumulator {
 public:
  explicit MsAccumulator(std::shared_ptr<const Layout> layout)
      : layout_(std::move(layout)), sum_(layout_->total(), 0.0) {}

  void add(std::span<const T> grad) {
    if (grad.size() != sum_.size()) {
      throw ShapeError("MsAccumulator: gradient layout mismatch");
    }
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      sum_[i] += g * g;
    }
    ++count_;
  }

  std::size_t count() const { return count_; }

  GradientStats<T> finish(std::size_t batch_size) const {
    if (count_ == 0) throw ValidationError("collect_ms_g: zero batches");
    GradientStats<T> s;
    s.ms_g = ParamVector<T>(layout_);
    for (std::size_t i = 0; i < sum_.size(); ++i) {
      s.ms_g[i] = static_cast<T>(sum_[i] / static_cast<double>(count_));
    }
    s.batch_size_used = batch_size;
    s.num_batches = count_;
    return s;
  }

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<double> sum_;
  std::size_t count_ = 0;
};

// One pass over the data with frozen parameters. Each batch contributes the
// squared gradient of its mean per-token loss, taken before any clipping.
template <typename T>
GradientStats<T> collect_ms_g(const ModelConfig& cfg, const ParamVector<T>& params,
                              const TokenSequence& data, std::size_t batch_size,
                              std::size_t unroll_length) {
  data.validate();
  const BatchPlan plan(data, batch_size, unroll_length);
  if (plan.num_chunks() == 0) throw ValidationError("collect_ms_g: zero batches");
  MsAccumulator<T> acc(params.layout_ptr());
  auto state = RnnState<T>::zeros(cfg, batch_size);
  const T inv = static_cast<T>(1.0 / static_cast<double>(batch_size * unroll_length));
  std::vector<std::size_t> inputs, targets;
  for (std::size_t k = 0; k < plan.num_chunks(); ++k) {
    plan.chunk(k, inputs, targets);
    auto fwd = forward_segment(cfg, params, state, inputs, targets);
    auto grad = backward_segment(fwd.tape);
    for (auto& x : grad.values()) x *= inv;
    acc.add(grad.values());
    state = std::move(fwd.state);
  }
  return acc.finish(batch_size);
}

}  // namespace dyneval
