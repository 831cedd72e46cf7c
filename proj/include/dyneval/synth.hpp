#pragma once

// Deterministic synthetic text. A "language" is a lexicon of pronounceable
// words built from a syllable inventory, drawn with Zipfian frequencies.
// Documents boost a handful of rare topic words, which gives text with
// recurring rare patterns. Two languages built from different inventories
// share an alphabet but little vocabulary, which makes a train/shifted-test
// pair.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "dyneval/numcore.hpp"

namespace dyneval::synth {

struct LanguageStyle {
  std::string onsets;   // single-letter consonants
  std::string vowels;
  std::string codas;    // optional syllable-final consonants
  std::vector<std::string> suffixes;
  double coda_rate = 0.3;
  double suffix_rate = 0.2;
};

inline LanguageStyle english_like() {
  return {"bcdfghklmnprstwy", "aeiou", "nrstlk", {"ing", "ed", "ly", "er", "s"}, 0.35, 0.25};
}

inline LanguageStyle romance_like() {
  return {"bcdfglmnprst", "aeiou", "nsrl", {"os", "as", "cion", "mente", "ado", "es"}, 0.2, 0.3};
}

struct DocumentOptions {
  std::size_t approx_chars = 3000;
  std::size_t topic_words = 6;
  double topic_rate = 0.15;
};

class Language {
 public:
  Language(const LanguageStyle& style, std::uint64_t seed, std::size_t lexicon_size = 3000)
      : style_(style) {
    Rng rng(seed);
    std::set<std::string> seen;
    while (lexicon_.size() < lexicon_size) {
      std::string w = make_word(rng);
      if (seen.insert(w).second) lexicon_.push_back(std::move(w));
    }
    double total = 0.0;
    for (std::size_t r = 0; r < lexicon_.size(); ++r) {
      total += 1.0 / std::pow(static_cast<double>(r + 1), 1.05);
      cumulative_.push_back(total);
    }
    for (auto& c : cumulative_) c /= total;
  }

  const std::vector<std::string>& lexicon() const { return lexicon_; }

  std::size_t zipf_rank(Rng& rng) const {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()),
                                 lexicon_.size() - 1);
  }

  std::string document(Rng& rng, const DocumentOptions& opt) const {
    std::vector<std::size_t> topics;
    const std::size_t lo = lexicon_.size() / 4;
    for (std::size_t i = 0; i < opt.topic_words; ++i) {
      topics.push_back(lo + rng.below(lexicon_.size() - lo));
    }
    std::string out;
    while (out.size() < opt.approx_chars) {
      const std::size_t sentences = 3 + rng.below(4);
      for (std::size_t s = 0; s < sentences; ++s) {
        const std::size_t words = 5 + rng.below(10);
        for (std::size_t w = 0; w < words; ++w) {
          std::size_t rank = zipf_rank(rng);
          if (!topics.empty() && rng.uniform() < opt.topic_rate) {
            rank = topics[rng.below(topics.size())];
          }
          std::string word = lexicon_[rank];
          if (w == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
          out += word;
          if (w + 1 < words) out += rng.uniform() < 0.08 ? ", " : " ";
        }
        out += s + 1 < sentences ? ". " : ".\n";
      }
    }
    out += '\n';
    return out;
  }

  std::string corpus(Rng& rng, std::size_t total_chars, const DocumentOptions& opt = {}) const {
    std::string out;
    while (out.size() < total_chars) out += document(rng, opt);
    return out;
  }

 private:
  std::string make_word(Rng& rng) const {
    const double u = rng.uniform();
    const std::size_t syllables = u < 0.25 ? 1 : (u < 0.7 ? 2 : (u < 0.92 ? 3 : 4));
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += style_.onsets[rng.below(style_.onsets.size())];
      w += style_.vowels[rng.below(style_.vowels.size())];
      if (rng.uniform() < style_.coda_rate) w += style_.codas[rng.below(style_.codas.size())];
    }
    if (rng.uniform() < style_.suffix_rate) {
      w += style_.suffixes[rng.below(style_.suffixes.size())];
    }
    return w;
  }

  LanguageStyle style_;
  std::vector<std::string> lexicon_;
  std::vector<double> cumulative_;
};

// Applies a seeded permutation to the letters a-z (case preserved).
inline std::string permute_letters(const std::string& text, std::uint64_t seed) {
  std::string perm = "abcdefghijklmnopqrstuvwxyz";
  Rng rng(seed);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::string out = text;
  for (auto& c : out) {
    if (c >= 'a' && c <= 'z') {
      c = perm[static_cast<std::size_t>(c - 'a')];
    } else if (c >= 'A' && c <= 'Z') {
      c = static_cast<char>(std::toupper(static_cast<unsigned char>(perm[static_cast<std::size_t>(c - 'A')])));
    }
  }
  return out;
}

}  // namespace dyneval::synth
