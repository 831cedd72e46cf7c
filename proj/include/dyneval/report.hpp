#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace dyneval {

// Losses are kept in nats; bits and perplexity are derived on demand.
struct EvalReport {
  std::vector<double> segment_losses;
  std::vector<std::size_t> segment_starts;
  std::vector<std::size_t> segment_lengths;
  std::vector<double> token_losses;

  void add_segment(std::size_t start, std::span<const double> losses) {
    double s = 0.0;
    for (double l : losses) {
      s += l;
      token_losses.push_back(l);
    }
    segment_starts.push_back(start);
    segment_lengths.push_back(losses.size());
    segment_losses.push_back(s);
  }

  std::size_t token_count() const { return token_losses.size(); }

  double total_nats() const {
    double s = 0.0;
    for (double l : token_losses) s += l;
    return s;
  }
  double mean_nats() const {
    return total_nats() / static_cast<double>(token_count());
  }
  double bits_per_token() const { return mean_nats() / std::numbers::ln2; }
  double perplexity() const { return std::exp(mean_nats()); }

  bool operator==(const EvalReport&) const = default;
};

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// segment_index,start_token,loss_nats,mean_bits_per_token
inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "segment_index,start_token,loss_nats,mean_bits_per_token\n";
  for (std::size_t i = 0; i < r.segment_losses.size(); ++i) {
    const double bits = r.segment_losses[i] /
                        (std::numbers::ln2 * static_cast<double>(r.segment_lengths[i]));
    os << i << ',' << r.segment_starts[i] << ',' << format_real(r.segment_losses[i])
       << ',' << format_real(bits) << '\n';
  }
}

}  // namespace dyneval
