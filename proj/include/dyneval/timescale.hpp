#pragma once

// Windowed static-vs-dynamic loss curves over many equal-length sequences.

#include <algorithm>
#include <cstddef>
#include <exception>
#include <numbers>
#include <ostream>
#include <thread>
#include <vector>

#include "dyneval/data.hpp"
#include "dyneval/dynamic_evaluation.hpp"
#include "dyneval/error.hpp"
#include "dyneval/model.hpp"
#include "dyneval/report.hpp"

namespace dyneval {

struct TimescaleRow {
  std::size_t window_start = 0;
  double static_bpc = 0.0;
  double dynamic_bpc = 0.0;
  double advantage_bpc = 0.0;  // static - dynamic
};

// The test sequence is cut into consecutive sequences of seq_len tokens; each
// is evaluated statically and dynamically from fresh adapted parameters.
// Within a sequence, prediction p (predicting token p + 1) falls in window
// floor(p / window); losses are averaged over all sequences and predictions
// in a window. A sequence has seq_len - 1 predictions, so the last window
// holds one fewer than the others.
template <typename T>
std::vector<TimescaleRow> timescale_report(const ModelConfig& cfg,
                                           const ParamVector<T>& theta_g,
                                           const GradientStats<T>* stats,
                                           const TokenSequence& test_seq,
                                           std::size_t seq_len, std::size_t window,
                                           const DynEvalConfig& dcfg,
                                           std::size_t threads = 0) {
  if (window < 1 || seq_len < 2 || seq_len % window != 0) {
    throw ValidationError("timescale: window must divide seq_len (seq_len >= 2)");
  }
  const std::size_t count = test_seq.size() / seq_len;
  if (count < 1) {
    throw ValidationError("timescale: test sequence shorter than one sequence of " +
                          std::to_string(seq_len));
  }
  const std::size_t windows = seq_len / window;
  std::vector<EvalReport> stat(count), dyn(count);
  std::vector<std::exception_ptr> errors(count);
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, count);
  auto work = [&](std::size_t worker) {
    for (std::size_t k = worker; k < count; k += threads) {
      try {
        const auto piece = test_seq.slice(k * seq_len, (k + 1) * seq_len);
        stat[k] = static_evaluate(cfg, theta_g, piece, dcfg.effective().segment_len);
        dyn[k] = dynamic_evaluate(cfg, theta_g, stats, piece, dcfg);
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

  std::vector<TimescaleRow> rows(windows);
  for (std::size_t w = 0; w < windows; ++w) {
    double s = 0.0, d = 0.0;
    std::size_t n = 0;
    const std::size_t lo = w * window;
    const std::size_t hi = std::min(lo + window, seq_len - 1);
    for (std::size_t k = 0; k < count; ++k) {
      for (std::size_t p = lo; p < hi; ++p) {
        s += stat[k].token_losses[p];
        d += dyn[k].token_losses[p];
        ++n;
      }
    }
    auto& r = rows[w];
    r.window_start = lo;
    const double denom = std::numbers::ln2 * static_cast<double>(std::max<std::size_t>(n, 1));
    r.static_bpc = s / denom;
    r.dynamic_bpc = d / denom;
    r.advantage_bpc = r.static_bpc - r.dynamic_bpc;
  }
  return rows;
}

inline void write_timescale_csv(std::ostream& os, const std::vector<TimescaleRow>& rows) {
  os << "window_start,static_bpc,dynamic_bpc,advantage_bpc\n";
  for (const auto& r : rows) {
    os << r.window_start << ',' << format_real(r.static_bpc) << ','
       << format_real(r.dynamic_bpc) << ',' << format_real(r.advantage_bpc) << '\n';
  }
}

}  // namespace dyneval
