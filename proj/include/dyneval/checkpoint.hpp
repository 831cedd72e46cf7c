#pragma once

// Binary checkpoint:
//   "DYNE" | u16 version | u32 header length | header (UTF-8 key=value lines)
//   | parameters as little-endian f32 in layout order
//   | optional mean-squared-gradient block, same layout (header has_ms_g=1)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dyneval/data.hpp"
#include "dyneval/error.hpp"
#include "dyneval/model.hpp"
#include "dyneval/report.hpp"
#include "dyneval/train.hpp"

namespace dyneval {

inline constexpr char kCheckpointMagic[4] = {'D', 'Y', 'N', 'E'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  Vocab vocab;
  ParamVector<float> params;
  std::optional<GradientStats<float>> stats;
  std::optional<std::size_t> train_batch_size;  // default batch for later MS_g runs
};

namespace detail {

inline void put_u16(std::ostream& os, std::uint16_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>(v >> 8)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint16_t get_u16(std::istream& is) {
  unsigned char b[2];
  if (!is.read(reinterpret_cast<char*>(b), 2)) throw FormatError("checkpoint: truncated");
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline void put_f32_block(std::ostream& os, std::span<const float> v) {
  std::vector<char> buf(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int k = 0; k < 4; ++k) buf[i * 4 + k] = static_cast<char>((u >> (8 * k)) & 0xFF);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void get_f32_block(std::istream& is, std::span<float> v) {
  std::vector<unsigned char> buf(v.size() * 4);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw FormatError("checkpoint: truncated parameter block");
  }
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(buf[i * 4 + k]) << (8 * k);
    v[i] = std::bit_cast<float>(u);
  }
}

inline std::string hex_encode(std::string_view s) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (unsigned char c : s) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 0xF]);
  }
  return out;
}

inline std::string hex_decode(std::string_view s) {
  if (s.size() % 2 != 0) throw FormatError("checkpoint: bad hex token");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw FormatError("checkpoint: bad hex token");
  };
  std::string out;
  for (std::size_t i = 0; i < s.size(); i += 2) {
    out.push_back(static_cast<char>(nibble(s[i]) * 16 + nibble(s[i + 1])));
  }
  return out;
}

inline std::size_t parse_count(const std::map<std::string, std::string>& h,
                               const std::string& key) {
  auto it = h.find(key);
  if (it == h.end()) throw FormatError("checkpoint: missing header key '" + key + "'");
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw FormatError("checkpoint: bad value for '" + key + "'");
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  const auto layout = model_layout(ck.config);
  if (ck.params.size() != layout->total()) {
    throw ShapeError("write_checkpoint: parameters do not match config");
  }
  if (ck.vocab.size() != ck.config.vocab_size) {
    throw ShapeError("write_checkpoint: vocab size does not match config");
  }
  std::ostringstream header;
  header << "vocab_size=" << ck.config.vocab_size << '\n'
         << "embed_dim=" << ck.config.embed_dim << '\n'
         << "hidden_dim=" << ck.config.hidden_dim << '\n'
         << "num_layers=" << ck.config.num_layers << '\n'
         << "dropout_keep=" << format_real(ck.config.dropout_keep) << '\n'
         << "vocab_mode=" << to_string(ck.vocab.mode()) << '\n'
         << "precision=f32\n"
         << "has_ms_g=" << (ck.stats ? 1 : 0) << '\n';
  if (ck.stats) {
    header << "ms_batch_size=" << ck.stats->batch_size_used << '\n'
           << "ms_num_batches=" << ck.stats->num_batches << '\n';
  }
  if (ck.train_batch_size) header << "train_batch_size=" << *ck.train_batch_size << '\n';
  if (ck.vocab.unk_id()) header << "vocab_unk=" << *ck.vocab.unk_id() << '\n';
  if (ck.vocab.mode() != VocabMode::Byte) {
    header << "vocab=";
    for (std::size_t i = 0; i < ck.vocab.size(); ++i) {
      if (i) header << ',';
      header << detail::hex_encode(ck.vocab.token(i));
    }
    header << '\n';
  }
  const std::string h = header.str();
  os.write(kCheckpointMagic, 4);
  detail::put_u16(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(h.size()));
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  detail::put_f32_block(os, ck.params.values());
  if (ck.stats) {
    if (ck.stats->ms_g.size() != layout->total()) {
      throw ShapeError("write_checkpoint: ms_g does not match config");
    }
    detail::put_f32_block(os, ck.stats->ms_g.values());
  }
  if (!os) throw FormatError("write_checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  const auto version = detail::get_u16(is);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto hlen = detail::get_u32(is);
  std::string h(hlen, '\0');
  if (!is.read(h.data(), hlen)) throw FormatError("checkpoint: truncated header");
  utf8::split_code_points(h);

  std::map<std::string, std::string> kv;
  std::istringstream lines(h);
  for (std::string line; std::getline(lines, line);) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed header line");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["precision"] != "f32") throw FormatError("checkpoint: unsupported precision");

  Checkpoint ck;
  ck.config.vocab_size = detail::parse_count(kv, "vocab_size");
  ck.config.embed_dim = detail::parse_count(kv, "embed_dim");
  ck.config.hidden_dim = detail::parse_count(kv, "hidden_dim");
  ck.config.num_layers = detail::parse_count(kv, "num_layers");
  try {
    ck.config.dropout_keep = std::stod(kv.at("dropout_keep"));
  } catch (const std::exception&) {
    throw FormatError("checkpoint: bad dropout_keep");
  }
  try {
    ck.config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }

  const auto mode = parse_vocab_mode(kv["vocab_mode"]);
  std::vector<std::string> tokens;
  if (mode != VocabMode::Byte) {
    std::string_view list = kv["vocab"];
    std::size_t i = 0;
    while (i <= list.size()) {
      const auto comma = list.find(',', i);
      const auto end = comma == std::string_view::npos ? list.size() : comma;
      tokens.push_back(detail::hex_decode(list.substr(i, end - i)));
      i = end + 1;
    }
  }
  std::optional<std::size_t> unk;
  if (kv.count("vocab_unk")) unk = detail::parse_count(kv, "vocab_unk");
  ck.vocab = Vocab::from_tokens(mode, std::move(tokens), unk);
  if (ck.vocab.size() != ck.config.vocab_size) {
    throw FormatError("checkpoint: vocab size does not match header");
  }

  const auto layout = model_layout(ck.config);
  ck.params = ParamVector<float>(layout);
  detail::get_f32_block(is, ck.params.values());
  if (kv.count("train_batch_size")) {
    ck.train_batch_size = detail::parse_count(kv, "train_batch_size");
  }
  if (detail::parse_count(kv, "has_ms_g") == 1) {
    GradientStats<float> s;
    s.ms_g = ParamVector<float>(layout);
    s.batch_size_used = detail::parse_count(kv, "ms_batch_size");
    s.num_batches = detail::parse_count(kv, "ms_num_batches");
    detail::get_f32_block(is, s.ms_g.values());
    ck.stats = std::move(s);
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open '" + path + "' for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace dyneval
