#pragma once

// Small trained models shared by several test files. Kept tiny so each test
// binary trains in a second or two.

#include <string>

#include "dyneval/dyneval.hpp"

namespace fixture {

using namespace dyneval;

struct CharModel {
  ModelConfig cfg;
  Vocab vocab;
  ParamVector<float> params;
  GradientStats<float> stats;
};

inline std::string english_text(std::size_t chars, std::uint64_t doc_seed) {
  synth::Language lang(synth::english_like(), 11, 400);
  Rng rng(doc_seed);
  return lang.corpus(rng, chars);
}

inline std::string romance_text(std::size_t chars, std::uint64_t doc_seed) {
  synth::Language lang(synth::romance_like(), 12, 400);
  Rng rng(doc_seed);
  return lang.corpus(rng, chars);
}

// Character model over `alphabet` trained on `text`.
inline CharModel train_char_model(const std::string& alphabet, const std::string& text,
                                  std::size_t hidden, std::uint64_t seed,
                                  std::size_t epochs = 1) {
  CharModel m;
  m.vocab = build_vocab(alphabet, VocabMode::Char);
  m.cfg = ModelConfig{m.vocab.size(), 16, hidden, 1, 1.0};
  const auto data = encode(text, m.vocab);
  Rng rng(seed);
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = 8;
  tc.unroll_length = 40;
  tc.learning_rate = 5.0;
  tc.clip_norm = 1.0;
  m.params = train(m.cfg, init_model<float>(m.cfg, rng), data, tc).params;
  m.stats = collect_ms_g(m.cfg, m.params, data, 8, 40);
  return m;
}

// English-like model; its alphabet covers the romance-like language too.
inline const CharModel& english_model() {
  static const CharModel m = [] {
    const auto text = english_text(120000, 1);
    return train_char_model(text + romance_text(20000, 99), text, 32, 5);
  }();
  return m;
}

}  // namespace fixture
