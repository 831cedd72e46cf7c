#pragma once

// Corpus ingestion: vocabularies, encoding, contiguous splits and the
// fixed-length segment stream used for test-time adaptation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dyneval/error.hpp"

namespace dyneval {

enum class VocabMode { Byte, Char, Word };

inline std::string to_string(VocabMode m) {
  switch (m) {
    case VocabMode::Byte: return "byte";
    case VocabMode::Char: return "char";
    case VocabMode::Word: return "word";
  }
  return "?";
}

inline VocabMode parse_vocab_mode(std::string_view s) {
  if (s == "byte") return VocabMode::Byte;
  if (s == "char") return VocabMode::Char;
  if (s == "word") return VocabMode::Word;
  throw ValidationError("unknown vocab mode '" + std::string(s) + "'");
}

namespace utf8 {

// Splits `text` into code points, each returned as its UTF-8 byte string.
inline std::vector<std::string_view> split_code_points(std::string_view text) {
  std::vector<std::string_view> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    } else {
      throw FormatError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + len > text.size()) throw FormatError("truncated UTF-8 sequence");
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc & 0xC0) != 0x80) {
        throw FormatError("invalid UTF-8 continuation byte at offset " +
                          std::to_string(i + k));
      }
      cp = (cp << 6) | (cc & 0x3F);
    }
    const bool overlong = (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
                          (len == 4 && cp < 0x10000);
    if (overlong || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      throw FormatError("invalid UTF-8 code point at offset " + std::to_string(i));
    }
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline std::uint32_t decode_one(std::string_view cp) {
  const auto c = static_cast<unsigned char>(cp[0]);
  if (cp.size() == 1) return c;
  std::uint32_t v = c & (0xFF >> (cp.size() + 1));
  for (std::size_t k = 1; k < cp.size(); ++k) {
    v = (v << 6) | (static_cast<unsigned char>(cp[k]) & 0x3F);
  }
  return v;
}

}  // namespace utf8

inline std::vector<std::string_view> split_whitespace(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' ||
           c == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline constexpr std::string_view kUnkToken = "<unk>";

class Vocab {
 public:
  Vocab() = default;

  // Restores a vocabulary from its ordered token list (as persisted in a
  // checkpoint). Byte mode ignores `tokens`.
  static Vocab from_tokens(VocabMode mode, std::vector<std::string> tokens,
                           std::optional<std::size_t> unk_id = std::nullopt) {
    Vocab v;
    v.mode_ = mode;
    if (mode == VocabMode::Byte) {
      tokens.clear();
      for (int b = 0; b < 256; ++b) tokens.emplace_back(1, static_cast<char>(b));
      unk_id = std::nullopt;
    }
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      if (!v.index_.emplace(v.tokens_[i], i).second) {
        throw FormatError("duplicate vocabulary token");
      }
    }
    if (unk_id && *unk_id >= v.tokens_.size()) {
      throw FormatError("unk id out of range");
    }
    if (mode == VocabMode::Word && !unk_id) {
      throw FormatError("word vocabulary requires an unk token");
    }
    v.unk_ = unk_id;
    return v;
  }

  VocabMode mode() const { return mode_; }
  std::size_t size() const { return tokens_.size(); }
  std::optional<std::size_t> unk_id() const { return unk_; }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::optional<std::size_t> find(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

 private:
  VocabMode mode_ = VocabMode::Byte;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
  std::optional<std::size_t> unk_;
};

// Byte: identity over 0..255. Char: sorted unique code points. Word: the
// `word_cap` most frequent whitespace tokens (ties broken lexicographically)
// followed by <unk>.
inline Vocab build_vocab(std::string_view text, VocabMode mode,
                         std::size_t word_cap = 10000) {
  if (text.empty()) throw ValidationError("build_vocab: empty input");
  switch (mode) {
    case VocabMode::Byte:
      return Vocab::from_tokens(VocabMode::Byte, {});
    case VocabMode::Char: {
      std::map<std::uint32_t, std::string> unique;
      for (auto cp : utf8::split_code_points(text)) {
        unique.emplace(utf8::decode_one(cp), std::string(cp));
      }
      std::vector<std::string> tokens;
      for (auto& [_, s] : unique) tokens.push_back(std::move(s));
      return Vocab::from_tokens(VocabMode::Char, std::move(tokens));
    }
    case VocabMode::Word: {
      utf8::split_code_points(text);  // validates encoding
      std::map<std::string, std::size_t> counts;
      for (auto w : split_whitespace(text)) {
        if (w != kUnkToken) ++counts[std::string(w)];
      }
      std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                              counts.end());
      std::stable_sort(ranked.begin(), ranked.end(),
                       [](const auto& a, const auto& b) { return a.second > b.second; });
      if (ranked.size() > word_cap) ranked.resize(word_cap);
      std::vector<std::string> tokens;
      for (auto& [w, _] : ranked) tokens.push_back(w);
      tokens.emplace_back(kUnkToken);
      const std::size_t unk = tokens.size() - 1;
      return Vocab::from_tokens(VocabMode::Word, std::move(tokens), unk);
    }
  }
  throw ValidationError("build_vocab: unknown mode");
}

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::size_t vocab_size = 0;

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }

  void validate() const {
    for (auto id : ids) {
      if (id >= vocab_size) {
        throw ValidationError("token id " + std::to_string(id) +
                              " outside vocab of size " +
                              std::to_string(vocab_size));
      }
    }
  }

  TokenSequence slice(std::size_t begin, std::size_t end) const {
    return {std::vector<std::size_t>(ids.begin() + static_cast<std::ptrdiff_t>(begin),
                                     ids.begin() + static_cast<std::ptrdiff_t>(end)),
            vocab_size};
  }
};

inline TokenSequence encode(std::string_view text, const Vocab& vocab) {
  TokenSequence seq;
  seq.vocab_size = vocab.size();
  auto lookup = [&](std::string_view tok) {
    if (auto id = vocab.find(tok)) return *id;
    if (auto unk = vocab.unk_id()) return *unk;
    throw ValidationError("encode: token not in vocabulary and no unk");
  };
  switch (vocab.mode()) {
    case VocabMode::Byte:
      for (char c : text) seq.ids.push_back(static_cast<unsigned char>(c));
      break;
    case VocabMode::Char:
      for (auto cp : utf8::split_code_points(text)) seq.ids.push_back(lookup(cp));
      break;
    case VocabMode::Word:
      utf8::split_code_points(text);
      for (auto w : split_whitespace(text)) seq.ids.push_back(lookup(w));
      break;
  }
  if (seq.ids.empty()) throw ValidationError("encode: no tokens in input");
  return seq;
}

inline std::string decode(std::span<const std::size_t> ids, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (vocab.mode() == VocabMode::Word && i > 0) out.push_back(' ');
    out += vocab.token(ids[i]);
  }
  return out;
}

// One window of the segment stream. `start` is the index (into the target
// positions 0..len-2) of the segment's first prediction.
struct Segment {
  std::size_t index = 0;
  std::size_t start = 0;
  std::span<const std::size_t> inputs;
  std::span<const std::size_t> targets;
};

// Consecutive non-overlapping windows of n predictions; the last window holds
// the remainder. Targets are the inputs shifted by one.
class SegmentStream {
 public:
  SegmentStream(std::span<const std::size_t> ids, std::size_t n)
      : ids_(ids), n_(n) {
    if (n < 1) throw ValidationError("segments: segment length must be >= 1");
    if (ids.size() < 2) {
      throw ValidationError("segments: sequence needs at least 2 tokens");
    }
  }

  std::size_t segment_length() const { return n_; }
  std::size_t num_targets() const { return ids_.size() - 1; }
  std::size_t size() const { return (num_targets() + n_ - 1) / n_; }

  Segment operator[](std::size_t i) const {
    const std::size_t start = i * n_;
    const std::size_t len = std::min(n_, num_targets() - start);
    return {i, start, ids_.subspan(start, len), ids_.subspan(start + 1, len)};
  }

 private:
  std::span<const std::size_t> ids_;
  std::size_t n_;
};

inline SegmentStream segments(const TokenSequence& seq, std::size_t n) {
  return SegmentStream(seq.ids, n);
}

struct CorpusSplit {
  TokenSequence train;
  TokenSequence valid;
  TokenSequence test;
};

// Contiguous, order-preserving split. Valid and test sizes are floored; the
// remainder goes to train.
inline CorpusSplit split_corpus(const TokenSequence& seq,
                                std::span<const double> ratios) {
  if (ratios.size() != 3) throw ValidationError("split_corpus: need 3 ratios");
  double sum = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ValidationError("split_corpus: ratios must be positive");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw ValidationError("split_corpus: ratios must sum to 1");
  }
  const double n = static_cast<double>(seq.size());
  const auto n_valid = static_cast<std::size_t>(std::floor(n * ratios[1] + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(n * ratios[2] + 1e-9));
  if (n_valid == 0 || n_test == 0 || n_valid + n_test >= seq.size()) {
    throw ValidationError("split_corpus: a split would be empty");
  }
  const std::size_t n_train = seq.size() - n_valid - n_test;
  return {seq.slice(0, n_train), seq.slice(n_train, n_train + n_valid),
          seq.slice(n_train + n_valid, seq.size())};
}

inline CorpusSplit split_corpus(const TokenSequence& seq) {
  const double standard[3] = {0.90, 0.05, 0.05};
  return split_corpus(seq, standard);
}

}  // namespace dyneval
