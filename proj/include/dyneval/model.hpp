#pragma once

// Stacked LSTM language model: embedding -> LSTM layers -> softmax output.
//
// Parameters live in one flat ParamVector with a fixed layout so that trained
// weights, adapted weights, gradients and gradient statistics line up element
// for element. Every function is templated on the scalar type; float is the
// working precision and double exists for gradient checking.

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyneval/error.hpp"
#include "dyneval/numcore.hpp"

namespace dyneval {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t embed_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t num_layers = 1;
  double dropout_keep = 1.0;

  void validate() const {
    if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1 || num_layers < 1) {
      throw ConfigError("ModelConfig: all sizes must be >= 1");
    }
    if (!(dropout_keep > 0.0 && dropout_keep <= 1.0)) {
      throw ConfigError("ModelConfig: dropout_keep must be in (0, 1]");
    }
  }

  std::size_t layer_input_dim(std::size_t layer) const {
    return layer == 0 ? embed_dim : hidden_dim;
  }

  bool operator==(const ModelConfig&) const = default;
};

struct ParamSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const ParamSpec&) const = default;
};

class Layout {
 public:
  void add(std::string name, std::size_t rows, std::size_t cols) {
    entries_.push_back({std::move(name), rows, cols, total_});
    total_ += rows * cols;
  }

  const std::vector<ParamSpec>& entries() const { return entries_; }
  std::size_t total() const { return total_; }

  const ParamSpec& at(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return e;
    }
    throw ValidationError("Layout: no parameter named '" + name + "'");
  }

  // Index of the entry containing flat element `i`.
  std::size_t entry_of(std::size_t i) const {
    for (std::size_t k = 0; k < entries_.size(); ++k) {
      if (i < entries_[k].offset + entries_[k].size()) return k;
    }
    throw ValidationError("Layout: element index out of range");
  }

  bool operator==(const Layout&) const = default;

 private:
  std::vector<ParamSpec> entries_;
  std::size_t total_ = 0;
};

template <typename T>
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::shared_ptr<const Layout> layout, T fill = T(0))
      : layout_(std::move(layout)), values_(layout_->total(), fill) {}
  ParamVector(std::shared_ptr<const Layout> layout, std::vector<T> values)
      : layout_(std::move(layout)), values_(std::move(values)) {
    if (values_.size() != layout_->total()) {
      throw ShapeError("ParamVector: " + std::to_string(values_.size()) +
                       " values for a layout of " + std::to_string(layout_->total()));
    }
  }

  const Layout& layout() const { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  std::span<T> group(const std::string& name) {
    const auto& e = layout_->at(name);
    return {values_.data() + e.offset, e.size()};
  }
  std::span<const T> group(const std::string& name) const {
    const auto& e = layout_->at(name);
    return {values_.data() + e.offset, e.size()};
  }

  template <typename U>
  bool same_layout(const ParamVector<U>& other) const {
    if (!layout_ || !other.layout_ptr()) return layout_ == other.layout_ptr();
    return layout_ == other.layout_ptr() || *layout_ == other.layout();
  }

  template <typename U>
  ParamVector<U> cast() const {
    ParamVector<U> out(layout_);
    for (std::size_t i = 0; i < values_.size(); ++i) {
      out[i] = static_cast<U>(values_[i]);
    }
    return out;
  }

  bool operator==(const ParamVector& other) const {
    return same_layout(other) && values_ == other.values_;
  }

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<T> values_;
};

// Entries, in order: embed (V x E); per layer l: lstm<l>.w ((in+H) x 4H) and
// lstm<l>.b (1 x 4H); out.w (H x V); out.b (1 x V). Gate order is i, f, g, o.
inline std::shared_ptr<const Layout> model_layout(const ModelConfig& cfg) {
  cfg.validate();
  auto layout = std::make_shared<Layout>();
  const std::size_t h = cfg.hidden_dim;
  layout->add("embed", cfg.vocab_size, cfg.embed_dim);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    layout->add("lstm" + std::to_string(l) + ".w", cfg.layer_input_dim(l) + h,
                4 * h);
    layout->add("lstm" + std::to_string(l) + ".b", 1, 4 * h);
  }
  layout->add("out.w", h, cfg.vocab_size);
  layout->add("out.b", 1, cfg.vocab_size);
  return layout;
}

inline std::size_t parameter_count(const ModelConfig& cfg) {
  return model_layout(cfg)->total();
}

inline bool is_bias_entry(const ParamSpec& e) {
  return e.name.size() >= 2 && e.name.compare(e.name.size() - 2, 2, ".b") == 0;
}

template <typename T>
ParamVector<T> init_model(const ModelConfig& cfg, Rng& rng) {
  ParamVector<T> params(model_layout(cfg));
  const double k = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  const std::size_t h = cfg.hidden_dim;
  for (const auto& e : params.layout().entries()) {
    auto g = params.group(e.name);
    if (is_bias_entry(e)) {
      if (e.name.rfind("lstm", 0) == 0) {
        for (std::size_t j = h; j < 2 * h; ++j) g[j] = T(1);
      }
      continue;
    }
    for (auto& v : g) v = static_cast<T>(rng.uniform(-k, k));
  }
  return params;
}

// Per-layer hidden and cell activations, each batch x hidden_dim.
template <typename T>
struct RnnState {
  std::vector<Tensor2<T>> h;
  std::vector<Tensor2<T>> c;

  static RnnState zeros(const ModelConfig& cfg, std::size_t batch = 1) {
    RnnState s;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      s.h.emplace_back(batch, cfg.hidden_dim);
      s.c.emplace_back(batch, cfg.hidden_dim);
    }
    return s;
  }

  std::size_t batch() const { return h.empty() ? 0 : h.front().rows(); }
  std::span<const T> top_hidden(std::size_t b = 0) const {
    return h.back().row(b);
  }

  template <typename U>
  RnnState<U> cast() const {
    RnnState<U> out;
    for (std::size_t l = 0; l < h.size(); ++l) {
      out.h.emplace_back(h[l].rows(), h[l].cols());
      out.c.emplace_back(c[l].rows(), c[l].cols());
      for (std::size_t i = 0; i < h[l].size(); ++i) {
        out.h[l].data()[i] = static_cast<U>(h[l].data()[i]);
        out.c[l].data()[i] = static_cast<U>(c[l].data()[i]);
      }
    }
    return out;
  }

  bool operator==(const RnnState&) const = default;
};

// Read-only view of an adaptation matrix acting on a subset of the top layer's
// hidden units: h'[s_j] = h[s_j] + sum_k m[j][k] * h[s_k].
template <typename T>
struct HiddenAdapter {
  std::span<const std::size_t> subset;
  std::span<const T> m;  // subset.size() x subset.size(), row-major
};

namespace detail {

template <typename T>
void apply_adapter(const HiddenAdapter<T>& a, std::span<T> h) {
  const std::size_t n = a.subset.size();
  std::vector<T> delta(n, T(0));
  for (std::size_t j = 0; j < n; ++j) {
    T s = T(0);
    for (std::size_t k = 0; k < n; ++k) s += a.m[j * n + k] * h[a.subset[k]];
    delta[j] = s;
  }
  for (std::size_t j = 0; j < n; ++j) h[a.subset[j]] += delta[j];
}

struct ModelOffsets {
  std::size_t embed = 0;
  std::vector<std::size_t> w;
  std::vector<std::size_t> b;
  std::size_t out_w = 0;
  std::size_t out_b = 0;

  explicit ModelOffsets(const ModelConfig& cfg) {
    const std::size_t h = cfg.hidden_dim;
    std::size_t off = cfg.vocab_size * cfg.embed_dim;
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      w.push_back(off);
      off += (cfg.layer_input_dim(l) + h) * 4 * h;
      b.push_back(off);
      off += 4 * h;
    }
    out_w = off;
    out_b = off + h * cfg.vocab_size;
  }
};

template <typename T>
struct StepRecord {
  std::vector<Tensor2<T>> xh;      // [input, h_prev] per layer
  std::vector<Tensor2<T>> gates;   // activated i, f, g, o per layer
  std::vector<Tensor2<T>> c_prev;  // per layer
  std::vector<Tensor2<T>> tc;      // tanh(c) per layer
  Tensor2<T> h_raw;                // top hidden before the adapter
  Tensor2<T> h_out;                // input to the output layer
  Tensor2<T> probs;
  Tensor2<T> in_mask;   // dropout on embeddings; empty when unused
  Tensor2<T> out_mask;  // dropout before the output layer; empty when unused
};

template <typename T>
void check_tokens(std::span<const std::size_t> tokens, std::size_t vocab) {
  for (std::size_t t : tokens) {
    if (t >= vocab) {
      throw ValidationError("token id " + std::to_string(t) +
                            " out of range for vocab of " +
                            std::to_string(vocab));
    }
  }
}

template <typename T>
Tensor2<T> dropout_mask(std::size_t rows, std::size_t cols, double keep,
                        Rng& rng) {
  Tensor2<T> m(rows, cols);
  const T scale = static_cast<T>(1.0 / keep);
  for (auto& v : m.values()) v = rng.uniform() < keep ? scale : T(0);
  return m;
}

// One time step for a batch of tokens. Updates `state` in place and fills
// `rec`. This is the only forward arithmetic in the model, so every entry
// point produces bit-identical activations.
template <typename T>
void lstm_step(const ModelConfig& cfg, const ModelOffsets& off, const T* p,
               RnnState<T>& state, std::span<const std::size_t> tokens,
               const HiddenAdapter<T>* adapter, Rng* dropout_rng,
               StepRecord<T>& rec) {
  const std::size_t batch = tokens.size();
  const std::size_t h = cfg.hidden_dim;
  const std::size_t e = cfg.embed_dim;
  const std::size_t v = cfg.vocab_size;
  const std::size_t layers = cfg.num_layers;
  const bool drop = dropout_rng != nullptr && cfg.dropout_keep < 1.0;

  rec.xh.resize(layers);
  rec.gates.resize(layers);
  rec.c_prev.resize(layers);
  rec.tc.resize(layers);

  if (drop) rec.in_mask = dropout_mask<T>(batch, e, cfg.dropout_keep, *dropout_rng);

  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = cfg.layer_input_dim(l);
    const std::size_t width = in + h;
    Tensor2<T>& xh = rec.xh[l];
    xh = Tensor2<T>(batch, width);
    for (std::size_t b = 0; b < batch; ++b) {
      T* row = xh.row(b).data();
      if (l == 0) {
        const T* emb = p + off.embed + tokens[b] * e;
        for (std::size_t j = 0; j < e; ++j) {
          row[j] = drop ? emb[j] * rec.in_mask(b, j) : emb[j];
        }
      } else {
        const auto below = state.h[l - 1].row(b);
        std::copy(below.begin(), below.end(), row);
      }
      const auto hp = state.h[l].row(b);
      std::copy(hp.begin(), hp.end(), row + in);
    }

    Tensor2<T>& z = rec.gates[l];
    z = Tensor2<T>(batch, 4 * h);
    const T* bias = p + off.b[l];
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy(bias, bias + 4 * h, z.row(b).data());
    }
    kernels::gemm_acc(batch, width, 4 * h, xh.data(), p + off.w[l], z.data());

    rec.c_prev[l] = state.c[l];
    Tensor2<T>& tc = rec.tc[l];
    tc = Tensor2<T>(batch, h);
    for (std::size_t b = 0; b < batch; ++b) {
      T* zr = z.row(b).data();
      T* cr = state.c[l].row(b).data();
      T* hr = state.h[l].row(b).data();
      T* tr = tc.row(b).data();
      for (std::size_t j = 0; j < h; ++j) {
        const T ig = kernels::sigmoid(zr[j]);
        const T fg = kernels::sigmoid(zr[h + j]);
        const T gg = std::tanh(zr[2 * h + j]);
        const T og = kernels::sigmoid(zr[3 * h + j]);
        zr[j] = ig;
        zr[h + j] = fg;
        zr[2 * h + j] = gg;
        zr[3 * h + j] = og;
        cr[j] = fg * cr[j] + ig * gg;
        tr[j] = std::tanh(cr[j]);
        hr[j] = og * tr[j];
      }
    }
  }

  Tensor2<T>& top = state.h.back();
  if (adapter != nullptr) {
    rec.h_raw = top;
    for (std::size_t b = 0; b < batch; ++b) apply_adapter(*adapter, top.row(b));
  }

  rec.h_out = top;
  if (drop) {
    rec.out_mask = dropout_mask<T>(batch, h, cfg.dropout_keep, *dropout_rng);
    for (std::size_t i = 0; i < rec.h_out.size(); ++i) {
      rec.h_out.data()[i] *= rec.out_mask.data()[i];
    }
  }

  rec.probs = Tensor2<T>(batch, v);
  const T* ob = p + off.out_b;
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(ob, ob + v, rec.probs.row(b).data());
  }
  kernels::gemm_acc(batch, h, v, rec.h_out.data(), p + off.out_w,
                    rec.probs.data());
  for (std::size_t b = 0; b < batch; ++b) {
    kernels::softmax_inplace(rec.probs.row(b).data(), v);
  }
}

}  // namespace detail

template <typename T>
struct ForwardOptions {
  const HiddenAdapter<T>* adapter = nullptr;
  // Non-null enables training-mode dropout with cfg.dropout_keep.
  Rng* dropout_rng = nullptr;
};

// Everything needed for exact reverse-mode differentiation of one segment.
// Holds a pointer to the parameters it was recorded with; they must outlive
// the tape and stay unmodified until backward_segment has run.
template <typename T>
struct SegmentTape {
  ModelConfig cfg;
  const ParamVector<T>* params = nullptr;
  std::size_t batch = 0;
  std::vector<std::size_t> inputs;   // time-major, steps x batch
  std::vector<std::size_t> targets;  // time-major, steps x batch
  std::vector<detail::StepRecord<T>> steps;
  std::vector<std::size_t> adapter_subset;
  std::vector<T> adapter_m;
  bool has_adapter = false;

  std::size_t length() const { return steps.size(); }
};

template <typename T>
struct ForwardResult {
  double loss_sum = 0.0;  // nats
  RnnState<T> state;
  SegmentTape<T> tape;
  std::vector<double> token_losses;  // time-major, steps x batch
};

// Scores `targets` given `inputs` starting from `state`. The batch size is
// taken from the state; tokens are time-major (inputs[t * batch + b]).
template <typename T>
ForwardResult<T> forward_segment(const ModelConfig& cfg,
                                 const ParamVector<T>& params,
                                 const RnnState<T>& state,
                                 std::span<const std::size_t> inputs,
                                 std::span<const std::size_t> targets,
                                 const ForwardOptions<T>& opts = {}) {
  const std::size_t batch = state.batch();
  if (params.size() != parameter_count(cfg)) {
    throw ShapeError("forward_segment: parameter vector does not match config");
  }
  if (state.h.size() != cfg.num_layers || batch == 0 ||
      state.h.front().cols() != cfg.hidden_dim) {
    throw ShapeError("forward_segment: state does not match config");
  }
  if (inputs.empty() || inputs.size() != targets.size() ||
      inputs.size() % batch != 0) {
    throw ValidationError(
        "forward_segment: inputs and targets must be non-empty, equal length "
        "and a multiple of the batch size");
  }
  detail::check_tokens<T>(inputs, cfg.vocab_size);
  detail::check_tokens<T>(targets, cfg.vocab_size);

  const detail::ModelOffsets off(cfg);
  const std::size_t steps = inputs.size() / batch;

  ForwardResult<T> out;
  out.state = state;
  out.tape.cfg = cfg;
  out.tape.params = &params;
  out.tape.batch = batch;
  out.tape.inputs.assign(inputs.begin(), inputs.end());
  out.tape.targets.assign(targets.begin(), targets.end());
  out.tape.steps.resize(steps);
  if (opts.adapter != nullptr) {
    out.tape.has_adapter = true;
    out.tape.adapter_subset.assign(opts.adapter->subset.begin(),
                                   opts.adapter->subset.end());
    out.tape.adapter_m.assign(opts.adapter->m.begin(), opts.adapter->m.end());
  }
  out.token_losses.reserve(inputs.size());

  for (std::size_t t = 0; t < steps; ++t) {
    auto& rec = out.tape.steps[t];
    detail::lstm_step(cfg, off, params.data(), out.state,
                      inputs.subspan(t * batch, batch), opts.adapter,
                      opts.dropout_rng, rec);
    for (std::size_t b = 0; b < batch; ++b) {
      const T p = rec.probs(b, targets[t * batch + b]);
      const double loss = -std::log(static_cast<double>(p));
      out.token_losses.push_back(loss);
      out.loss_sum += loss;
    }
  }
  return out;
}

struct BackwardOptions {
  bool param_grads = true;
  bool adapter_grads = false;
};

template <typename T>
struct BackwardResult {
  ParamVector<T> params;     // empty unless requested
  std::vector<T> adapter_m;  // empty unless requested
};

// Exact gradient of the tape's loss_sum. Gradients stop at the segment's
// incoming state (truncated backpropagation through time).
template <typename T>
BackwardResult<T> backward_segment(const SegmentTape<T>& tape,
                                   const BackwardOptions& opts) {
  const ModelConfig& cfg = tape.cfg;
  const std::size_t batch = tape.batch;
  const std::size_t h = cfg.hidden_dim;
  const std::size_t e = cfg.embed_dim;
  const std::size_t v = cfg.vocab_size;
  const std::size_t layers = cfg.num_layers;
  const std::size_t top = layers - 1;
  const detail::ModelOffsets off(cfg);
  const T* p = tape.params->data();

  BackwardResult<T> res;
  T* g = nullptr;
  if (opts.param_grads) {
    res.params = ParamVector<T>(tape.params->layout_ptr());
    g = res.params.data();
  }
  const bool want_adapter = opts.adapter_grads && tape.has_adapter;
  const std::size_t n_sub = tape.adapter_subset.size();
  if (want_adapter) res.adapter_m.assign(n_sub * n_sub, T(0));

  std::vector<Tensor2<T>> dh_next(layers, Tensor2<T>(batch, h));
  std::vector<Tensor2<T>> dc_next(layers, Tensor2<T>(batch, h));
  Tensor2<T> dlogits(batch, v);
  Tensor2<T> dh(batch, h);
  Tensor2<T> dz(batch, 4 * h);
  std::vector<T> tmp(n_sub);

  for (std::size_t t = tape.length(); t-- > 0;) {
    const auto& rec = tape.steps[t];

    dlogits = rec.probs;
    for (std::size_t b = 0; b < batch; ++b) {
      dlogits(b, tape.targets[t * batch + b]) -= T(1);
    }
    if (g) {
      kernels::gemm_tn_acc(batch, h, v, rec.h_out.data(), dlogits.data(),
                           g + off.out_w);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < v; ++j) g[off.out_b + j] += dlogits(b, j);
      }
    }
    kernels::gemm_nt(batch, v, h, dlogits.data(), p + off.out_w, dh.data());
    if (rec.out_mask.size() != 0) {
      for (std::size_t i = 0; i < dh.size(); ++i) {
        dh.data()[i] *= rec.out_mask.data()[i];
      }
    }
    for (std::size_t i = 0; i < dh.size(); ++i) {
      dh.data()[i] += dh_next[top].data()[i];
    }

    // dh now holds the gradient w.r.t. the adapted top hidden state.
    if (tape.has_adapter) {
      const auto& sub = tape.adapter_subset;
      const auto& m = tape.adapter_m;
      for (std::size_t b = 0; b < batch; ++b) {
        if (want_adapter) {
          for (std::size_t j = 0; j < n_sub; ++j) {
            const T dj = dh(b, sub[j]);
            for (std::size_t k = 0; k < n_sub; ++k) {
              res.adapter_m[j * n_sub + k] += dj * rec.h_raw(b, sub[k]);
            }
          }
        }
        for (std::size_t k = 0; k < n_sub; ++k) {
          T s = T(0);
          for (std::size_t j = 0; j < n_sub; ++j) {
            s += m[j * n_sub + k] * dh(b, sub[j]);
          }
          tmp[k] = s;
        }
        for (std::size_t k = 0; k < n_sub; ++k) dh(b, sub[k]) += tmp[k];
      }
    }

    for (std::size_t l = layers; l-- > 0;) {
      const std::size_t in = cfg.layer_input_dim(l);
      const std::size_t width = in + h;
      const auto& gates = rec.gates[l];
      const auto& tc = rec.tc[l];
      const auto& cp = rec.c_prev[l];
      for (std::size_t b = 0; b < batch; ++b) {
        const T* gr = gates.row(b).data();
        const T* tr = tc.row(b).data();
        const T* cr = cp.row(b).data();
        const T* dhr = dh.row(b).data();
        T* dcr = dc_next[l].row(b).data();
        T* dzr = dz.row(b).data();
        for (std::size_t j = 0; j < h; ++j) {
          const T ig = gr[j];
          const T fg = gr[h + j];
          const T gg = gr[2 * h + j];
          const T og = gr[3 * h + j];
          const T dout = dhr[j] * tr[j];
          const T dc = dcr[j] + dhr[j] * og * (T(1) - tr[j] * tr[j]);
          dzr[j] = dc * gg * ig * (T(1) - ig);
          dzr[h + j] = dc * cr[j] * fg * (T(1) - fg);
          dzr[2 * h + j] = dc * ig * (T(1) - gg * gg);
          dzr[3 * h + j] = dout * og * (T(1) - og);
          dcr[j] = dc * fg;
        }
      }
      if (g) {
        kernels::gemm_tn_acc(batch, width, 4 * h, rec.xh[l].data(), dz.data(),
                             g + off.w[l]);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < 4 * h; ++j) g[off.b[l] + j] += dz(b, j);
        }
      }
      Tensor2<T> dxh(batch, width);
      kernels::gemm_nt(batch, 4 * h, width, dz.data(), p + off.w[l],
                       dxh.data());
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < h; ++j) dh_next[l](b, j) = dxh(b, in + j);
      }
      if (l > 0) {
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t j = 0; j < h; ++j) {
            dh(b, j) = dxh(b, j) + dh_next[l - 1](b, j);
          }
        }
      } else if (g) {
        for (std::size_t b = 0; b < batch; ++b) {
          T* ge = g + off.embed + tape.inputs[t * batch + b] * e;
          for (std::size_t j = 0; j < e; ++j) {
            T d = dxh(b, j);
            if (rec.in_mask.size() != 0) d *= rec.in_mask(b, j);
            ge[j] += d;
          }
        }
      }
    }
  }
  return res;
}

template <typename T>
ParamVector<T> backward_segment(const SegmentTape<T>& tape) {
  return backward_segment(tape, BackwardOptions{}).params;
}

template <typename T>
struct Prediction {
  std::vector<T> dist;
  RnnState<T> state;
};

// One factor of the autoregressive product: P(next | history, token).
template <typename T>
Prediction<T> step_predict(const ModelConfig& cfg, const ParamVector<T>& params,
                           const RnnState<T>& state, std::size_t token,
                           const HiddenAdapter<T>* adapter = nullptr) {
  if (state.batch() != 1) throw ShapeError("step_predict: batch must be 1");
  if (params.size() != parameter_count(cfg)) {
    throw ShapeError("step_predict: parameter vector does not match config");
  }
  const std::size_t tok[1] = {token};
  detail::check_tokens<T>(tok, cfg.vocab_size);
  const detail::ModelOffsets off(cfg);
  Prediction<T> out{{}, state};
  detail::StepRecord<T> rec;
  detail::lstm_step(cfg, off, params.data(), out.state,
                    std::span<const std::size_t>(tok), adapter,
                    static_cast<Rng*>(nullptr), rec);
  out.dist = std::move(rec.probs.values());
  return out;
}

}  // namespace dyneval
