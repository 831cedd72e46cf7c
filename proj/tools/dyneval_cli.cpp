// Command-line front end: train, collect gradient statistics, tune and run
// static / dynamic / sparse / cache evaluation, sample, and time-scale reports.
// Every command writes its outputs plus a JSON manifest next to them.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dyneval/dyneval.hpp"

using namespace dyneval;
using json = nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open '" + path + "' for writing");
  return os;
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << h;
  return ss.str();
}

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad number '" + item + "' in list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty list");
  return out;
}

// Options shared by several commands. Values are filled in by CLI11.
struct Options {
  std::string corpus, checkpoint, out, log, condition, manifest, part, language;
  std::string vocab_mode = "char";
  std::size_t word_cap = 10000;
  std::size_t embed = 64, hidden = 128, layers = 1;
  double dropout_keep = 1.0;
  std::size_t epochs = 1, batch = 32, bptt = 0, train_bptt = 50;
  double train_lr = 1.0, clip = 5.0;
  std::uint64_t seed = 1;
  std::size_t ms_batch = 0, ms_bptt = 50, ms_limit = 0;
  bool no_ms = false;
  std::string rule = "rms-rms-prior";
  double lr = 0.0, decay = 0.0, epsilon = 1e-5;
  bool sparse = false;
  std::string etas = "0.0001,0.0003,0.001,0.003,0.01";
  std::string decays = "0,0.001,0.01,0.03";
  std::size_t adapt_units = 0;
  std::string subset = "first";
  std::string stats_corpus;
  double omega = 1.0, interp = 0.1;
  std::size_t capacity = 10000;
  std::size_t length = 300, condition_chars = 0;
  bool static_sample = false;
  std::size_t seq_len = 10000, window = 100, threads = 0;
  std::size_t chars = 1000000, topic_words = 6, doc_chars = 3000;
  double topic_rate = 0.15;
  std::uint64_t permute_seed = 0;
};

struct Loaded {
  Checkpoint ck;
  std::string ck_bytes;
};

Loaded load(const std::string& path) {
  Loaded l;
  l.ck_bytes = read_file(path);
  std::istringstream is(l.ck_bytes);
  l.ck = read_checkpoint(is);
  return l;
}

TokenSequence select_part(const TokenSequence& seq, const std::string& part) {
  if (part == "all") return seq;
  const auto split = split_corpus(seq);
  if (part == "train") return split.train;
  if (part == "valid") return split.valid;
  if (part == "test") return split.test;
  throw ConfigError("unknown corpus part '" + part + "' (train|valid|test|all)");
}

// Segments of 5 tokens for word models and 20 for character/byte models unless
// --bptt is given.
std::size_t segment_len(const Options& o, const Checkpoint& ck) {
  if (o.bptt > 0) return o.bptt;
  return ck.vocab.mode() == VocabMode::Word ? 5 : 20;
}

DynEvalConfig dyn_config(const Options& o, const Checkpoint& ck, const CLI::App* sub) {
  DynEvalConfig d;
  d.rule = parse_update_rule(o.rule);
  if (sub->count("--lr") == 0) throw ConfigError("--lr is required (or run `tune`)");
  if (sub->count("--decay") == 0 && d.rule != UpdateRule::TraditionalSgd) {
    throw ConfigError("--decay is required for rule " + to_string(d.rule) + " (or run `tune`)");
  }
  d.eta = o.lr;
  d.lambda = o.decay;
  d.epsilon = o.epsilon;
  d.segment_len = segment_len(o, ck);
  d.validate();
  return d;
}

const GradientStats<float>* stats_for(const DynEvalConfig& d, const Checkpoint& ck) {
  if (!needs_stats(d.rule)) return nullptr;
  if (!ck.stats) {
    throw ConfigError("rule " + to_string(d.rule) +
                      " needs gradient statistics; run `msg` on the checkpoint first");
  }
  return &*ck.stats;
}

void print_summary(const EvalReport& r) {
  std::cout << "tokens=" << r.token_losses.size() << " mean_nats=" << format_real(r.mean_nats())
            << " bits_per_token=" << format_real(r.bits_per_token())
            << " perplexity=" << format_real(r.perplexity()) << '\n';
}

class Manifest {
 public:
  Manifest(std::string command, const CLI::App* sub, std::vector<std::string> args)
      : command_(std::move(command)), args_(std::move(args)) {
    for (const auto* opt : sub->get_options()) {
      const std::string name = opt->get_name(false, true);
      if (name.empty() || name.find("--help") != std::string::npos) continue;
      if (opt->count() > 0) {
        std::string v;
        for (const auto& r : opt->results()) v += (v.empty() ? "" : ",") + r;
        flags_[name] = opt->get_type_size() == 0 && v.empty() ? "true" : v;
      } else {
        flags_[name] = opt->get_default_str();
      }
    }
  }

  void set_seed(std::uint64_t s) { seed_ = s; }
  void set_checkpoint(std::string_view bytes) { ck_hash_ = fnv1a_hex(bytes); }
  void set_corpus(std::string_view bytes) { corpus_hash_ = fnv1a_hex(bytes); }

  void write(const std::string& output) const {
    json j;
    j["command"] = command_;
    j["args"] = args_;
    j["flags"] = flags_;
    j["seed"] = seed_;
    j["checkpoint_hash"] = ck_hash_;
    j["corpus_hash"] = corpus_hash_;
    j["timestamp"] = utc_timestamp();
    j["output"] = output;
    auto os = open_out(output + ".manifest.json");
    os << j.dump(2) << '\n';
  }

 private:
  std::string command_;
  std::vector<std::string> args_;
  std::map<std::string, std::string> flags_;
  std::uint64_t seed_ = 0;
  std::string ck_hash_, corpus_hash_;
};

int run(std::vector<std::string> argv);

int dispatch(CLI::App& app, Options& o, const std::vector<std::string>& argv) {
  const auto* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  Manifest manifest(cmd, sub, std::vector<std::string>(argv.begin() + 2, argv.end()));
  manifest.set_seed(o.seed);

  if (cmd == "replay") {
    const json j = json::parse(read_file(o.manifest));
    std::vector<std::string> again{argv[0], j.at("command").get<std::string>()};
    for (const auto& a : j.at("args")) again.push_back(a.get<std::string>());
    if (again[1] == "replay") throw ValidationError("replay: manifest describes a replay");
    return run(again);
  }

  if (cmd == "gen-corpus") {
    synth::LanguageStyle style;
    if (o.language == "english") {
      style = synth::english_like();
    } else if (o.language == "romance") {
      style = synth::romance_like();
    } else {
      throw ConfigError("unknown language '" + o.language + "' (english|romance)");
    }
    // Each language has a fixed lexicon; --seed only varies the documents.
    synth::Language lang(style, o.language == "english" ? 11 : 12);
    Rng rng(o.seed);
    synth::DocumentOptions doc{o.doc_chars, o.topic_words, o.topic_rate};
    std::string text = lang.corpus(rng, o.chars, doc);
    text.resize(std::min(text.size(), o.chars));
    if (o.permute_seed != 0) text = synth::permute_letters(text, o.permute_seed);
    auto os = open_out(o.out);
    os << text;
    manifest.write(o.out);
    return 0;
  }

  if (cmd == "train") {
    const std::string text = read_file(o.corpus);
    manifest.set_corpus(text);
    Checkpoint ck;
    ck.vocab = build_vocab(text, parse_vocab_mode(o.vocab_mode), o.word_cap);
    const auto data = select_part(encode(text, ck.vocab), o.part.empty() ? "train" : o.part);
    ck.config = ModelConfig{ck.vocab.size(), o.embed, o.hidden, o.layers, o.dropout_keep};
    ck.config.validate();
    TrainConfig tc{o.epochs, o.batch, o.train_bptt, o.train_lr, o.clip, o.seed};
    Rng init(o.seed);
    auto log = open_out(o.log.empty() ? o.out + ".train_log.csv" : o.log);
    log << "epoch,mean_loss_nats\n";
    auto result = train(ck.config, init_model<float>(ck.config, init), data, tc,
                        [&](std::size_t e, double loss) {
                          log << e << ',' << format_real(loss) << '\n';
                          std::cout << "epoch " << e << " mean_loss_nats=" << format_real(loss)
                                    << " bits=" << format_real(loss / std::log(2.0)) << '\n';
                        });
    ck.params = std::move(result.params);
    ck.train_batch_size = o.batch;
    if (!o.no_ms) {
      const std::size_t mb = o.ms_batch ? o.ms_batch : o.batch;
      ck.stats = collect_ms_g(ck.config, ck.params, data, mb, o.ms_bptt);
    }
    save_checkpoint(o.out, ck);
    manifest.write(o.out);
    return 0;
  }

  auto loaded = load(o.checkpoint);
  auto& ck = loaded.ck;
  manifest.set_checkpoint(loaded.ck_bytes);

  if (cmd == "sample") {
    const std::string text = read_file(o.condition);
    manifest.set_corpus(text);
    auto cond = encode(text, ck.vocab);
    if (o.condition_chars > 0 && o.condition_chars < cond.size()) {
      cond = cond.slice(cond.size() - o.condition_chars, cond.size());
    }
    Rng rng(o.seed);
    std::vector<std::size_t> ids;
    if (o.static_sample) {
      ids = static_sample(ck.config, ck.params, cond, o.length, rng);
    } else {
      const auto d = dyn_config(o, ck, sub);
      ids = dynamic_sample(ck.config, ck.params, stats_for(d, ck), cond, o.length, d, rng);
    }
    auto os = open_out(o.out);
    os << decode(ids, ck.vocab);
    manifest.write(o.out);
    return 0;
  }

  const std::string text = read_file(o.corpus);
  manifest.set_corpus(text);
  const auto full = encode(text, ck.vocab);

  if (cmd == "msg") {
    const auto data = select_part(full, o.part.empty() ? "train" : o.part);
    const std::size_t mb = o.ms_batch ? o.ms_batch : ck.train_batch_size.value_or(32);
    ck.stats = collect_ms_g(ck.config, ck.params, data, mb, o.ms_bptt);
    std::cout << "ms_g collected over " << ck.stats->num_batches << " batches of "
              << ck.stats->batch_size_used << '\n';
    save_checkpoint(o.out, ck);
    manifest.write(o.out);
    return 0;
  }

  if (cmd == "tune") {
    const auto valid = select_part(full, o.part.empty() ? "valid" : o.part);
    std::vector<DynEvalConfig> grid;
    const auto rule = parse_update_rule(o.rule);
    for (double eta : parse_list(o.etas)) {
      for (double lam : parse_list(o.decays)) {
        DynEvalConfig d;
        d.rule = rule;
        d.eta = eta;
        d.lambda = lam;
        d.epsilon = o.epsilon;
        d.segment_len = segment_len(o, ck);
        d.validate();
        grid.push_back(d);
      }
    }
    const auto res = tune_hyperparams(ck.config, ck.params, stats_for(grid.front(), ck),
                                      valid, grid);
    auto os = open_out(o.out);
    os << "eta,lambda,epsilon,bptt,valid_loss_nats\n";
    for (const auto& row : res.table) {
      os << format_real(row.config.eta) << ',' << format_real(row.config.lambda) << ','
         << format_real(row.config.epsilon) << ',' << row.config.segment_len << ','
         << (row.diverged ? std::string("inf") : format_real(row.loss_nats)) << '\n';
    }
    std::cout << "best rule=" << to_string(res.best.rule) << " lr=" << format_real(res.best.eta)
              << " decay=" << format_real(res.best.lambda) << '\n';
    manifest.write(o.out);
    return 0;
  }

  if (cmd == "timescale") {
    const auto seq = select_part(full, o.part.empty() ? "all" : o.part);
    const auto d = dyn_config(o, ck, sub);
    const auto rows = timescale_report(ck.config, ck.params, stats_for(d, ck), seq, o.seq_len,
                                       o.window, d, o.threads);
    auto os = open_out(o.out);
    write_timescale_csv(os, rows);
    manifest.write(o.out);
    return 0;
  }

  const auto test = select_part(full, o.part.empty() ? "test" : o.part);
  EvalReport report;
  if (cmd == "eval") {
    report = static_evaluate(ck.config, ck.params, test, segment_len(o, ck));
  } else if (cmd == "dyneval" && !o.sparse) {
    const auto d = dyn_config(o, ck, sub);
    report = dynamic_evaluate(ck.config, ck.params, stats_for(d, ck), test, d);
  } else if (cmd == "dyneval" || cmd == "sparse-eval") {
    SparseConfig sc;
    sc.adapt_units = o.adapt_units;
    if (o.subset == "first") {
      sc.subset_rule = SubsetRule::FirstH;
    } else if (o.subset == "random") {
      sc.subset_rule = SubsetRule::SeededRandom;
    } else {
      throw ConfigError("unknown subset rule '" + o.subset + "' (first|random)");
    }
    sc.update = dyn_config(o, ck, sub);
    sc.validate(ck.config);
    std::optional<GradientStats<float>> m_stats;
    if (needs_stats(sc.update.rule)) {
      // The subset choice does not consume randomness needed later: the
      // evaluation below re-derives the same subset from the same seed.
      Rng probe(o.seed);
      const auto a = init_adaptation<float>(sc, ck.config, probe);
      TokenSequence data;
      if (o.stats_corpus.empty()) {
        data = select_part(full, "train");
      } else {
        const std::string stext = read_file(o.stats_corpus);
        data = select_part(encode(stext, ck.vocab), "train");
      }
      if (o.ms_limit > 0 && o.ms_limit < data.size()) data = data.slice(0, o.ms_limit);
      const std::size_t mb = o.ms_batch ? o.ms_batch : ck.train_batch_size.value_or(32);
      m_stats = collect_adapter_ms_g(ck.config, ck.params, a, data, mb, o.ms_bptt);
    }
    Rng rng(o.seed);
    auto run_result = sparse_dynamic_evaluate_run(ck.config, ck.params, sc,
                                                  m_stats ? &*m_stats : nullptr, test, rng);
    std::cout << "adapted_parameters=" << run_result.updated_parameters
              << " updates=" << run_result.updates << '\n';
    report = std::move(run_result.report);
  } else if (cmd == "cache-eval") {
    CacheConfig cc{o.omega, o.capacity, o.interp};
    report = cache_evaluate(ck.config, ck.params, test, cc, segment_len(o, ck));
  } else {
    throw ValidationError("unknown command " + cmd);
  }
  auto os = open_out(o.out);
  write_report_csv(os, report);
  print_summary(report);
  manifest.write(o.out);
  return 0;
}

void add_dyn_flags(CLI::App* s, Options& o) {
  s->add_option("--rule", o.rule, "traditional|sgd-prior|rms-prior|rms-rms-prior")
      ->capture_default_str();
  s->add_option("--lr", o.lr, "adaptation learning rate (eta)");
  s->add_option("--decay", o.decay, "decay rate toward trained parameters (lambda)");
  s->add_option("--epsilon", o.epsilon, "RMS stabilizer")->capture_default_str();
}

int run(std::vector<std::string> argv) {
  CLI::App app{"dynamic evaluation of LSTM language models"};
  app.require_subcommand(1);
  Options o;

  auto corpus = [&](CLI::App* s) {
    s->add_option("--corpus", o.corpus, "text file")->required();
    s->add_option("--part", o.part, "train|valid|test|all (90/5/5 split)");
  };
  auto ckpt = [&](CLI::App* s) {
    s->add_option("--checkpoint", o.checkpoint, "model checkpoint")->required();
  };
  auto out = [&](CLI::App* s, const char* what) {
    s->add_option("--out", o.out, what)->required();
  };
  auto seed = [&](CLI::App* s) { s->add_option("--seed", o.seed)->capture_default_str(); };
  auto bptt = [&](CLI::App* s) {
    s->add_option("--bptt", o.bptt, "segment length (default: 5 word, 20 char/byte)");
  };
  auto sparse = [&](CLI::App* s) {
    s->add_option("--adapt-units", o.adapt_units, "H: units adapted through an HxH matrix")
        ->capture_default_str();
    s->add_option("--subset", o.subset, "first|random")->capture_default_str();
    s->add_option("--stats-corpus", o.stats_corpus,
                  "corpus for adapter MS_g (default: --corpus)");
    s->add_option("--ms-limit", o.ms_limit, "max training tokens for adapter MS_g (0 = all)")
        ->capture_default_str();
  };
  auto ms = [&](CLI::App* s) {
    s->add_option("--ms-batch", o.ms_batch, "batch size for MS_g (default: training batch)");
    s->add_option("--ms-bptt", o.ms_bptt, "unroll length for MS_g")->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-corpus", "write deterministic synthetic text");
  gen->add_option("--language", o.language, "english|romance")->required();
  gen->add_option("--chars", o.chars)->capture_default_str();
  gen->add_option("--doc-chars", o.doc_chars)->capture_default_str();
  gen->add_option("--topic-words", o.topic_words)->capture_default_str();
  gen->add_option("--topic-rate", o.topic_rate)->capture_default_str();
  gen->add_option("--permute-seed", o.permute_seed, "permute letters a-z (0 = off)")
      ->capture_default_str();
  seed(gen);
  out(gen, "text file");

  auto* tr = app.add_subcommand("train", "train a model; also collects MS_g");
  corpus(tr);
  tr->add_option("--vocab", o.vocab_mode, "byte|char|word")->capture_default_str();
  tr->add_option("--word-cap", o.word_cap)->capture_default_str();
  tr->add_option("--embed", o.embed)->capture_default_str();
  tr->add_option("--hidden", o.hidden)->capture_default_str();
  tr->add_option("--layers", o.layers)->capture_default_str();
  tr->add_option("--dropout-keep", o.dropout_keep)->capture_default_str();
  tr->add_option("--epochs", o.epochs)->capture_default_str();
  tr->add_option("--batch", o.batch)->capture_default_str();
  tr->add_option("--bptt", o.train_bptt, "unroll length")->capture_default_str();
  tr->add_option("--lr", o.train_lr)->capture_default_str();
  tr->add_option("--clip", o.clip)->capture_default_str();
  tr->add_option("--log", o.log, "epoch log CSV (default: <out>.train_log.csv)");
  tr->add_flag("--no-ms", o.no_ms, "skip MS_g collection");
  ms(tr);
  seed(tr);
  out(tr, "checkpoint");

  auto* msg = app.add_subcommand("msg", "collect MS_g into a checkpoint");
  ckpt(msg);
  corpus(msg);
  ms(msg);
  seed(msg);
  out(msg, "checkpoint");

  auto* ev = app.add_subcommand("eval", "static evaluation");
  ckpt(ev);
  corpus(ev);
  bptt(ev);
  seed(ev);
  out(ev, "report CSV");

  auto* dy = app.add_subcommand("dyneval", "dynamic evaluation");
  ckpt(dy);
  corpus(dy);
  bptt(dy);
  add_dyn_flags(dy, o);
  dy->add_flag("--sparse", o.sparse, "adapt only an HxH matrix on the top hidden layer");
  sparse(dy);
  ms(dy);
  seed(dy);
  out(dy, "report CSV");

  auto* sp = app.add_subcommand("sparse-eval", "sparse dynamic evaluation");
  ckpt(sp);
  corpus(sp);
  bptt(sp);
  add_dyn_flags(sp, o);
  sparse(sp);
  ms(sp);
  seed(sp);
  out(sp, "report CSV");

  auto* ca = app.add_subcommand("cache-eval", "neural cache evaluation");
  ckpt(ca);
  corpus(ca);
  bptt(ca);
  ca->add_option("--omega", o.omega, "cache sharpness")->capture_default_str();
  ca->add_option("--interp", o.interp, "cache weight gamma")->capture_default_str();
  ca->add_option("--capacity", o.capacity)->capture_default_str();
  seed(ca);
  out(ca, "report CSV");

  auto* tu = app.add_subcommand("tune", "grid search eta and lambda on validation data");
  ckpt(tu);
  corpus(tu);
  bptt(tu);
  tu->add_option("--rule", o.rule)->capture_default_str();
  tu->add_option("--lrs", o.etas, "comma-separated eta grid")->capture_default_str();
  tu->add_option("--decays", o.decays, "comma-separated lambda grid")->capture_default_str();
  tu->add_option("--epsilon", o.epsilon)->capture_default_str();
  seed(tu);
  out(tu, "tuning CSV");

  auto* sa = app.add_subcommand("sample", "conditional sampling");
  ckpt(sa);
  sa->add_option("--condition", o.condition, "conditioning text file")->required();
  sa->add_option("--condition-chars", o.condition_chars, "use only the last N tokens (0 = all)")
      ->capture_default_str();
  sa->add_option("--length", o.length)->capture_default_str();
  sa->add_flag("--static", o.static_sample, "sample with fixed parameters");
  sa->add_option("--rule", o.rule)->capture_default_str();
  sa->add_option("--lr", o.lr);
  sa->add_option("--decay", o.decay);
  sa->add_option("--epsilon", o.epsilon)->capture_default_str();
  bptt(sa);
  seed(sa);
  out(sa, "sample text");

  auto* ts = app.add_subcommand("timescale", "windowed static vs dynamic loss");
  ckpt(ts);
  corpus(ts);
  bptt(ts);
  add_dyn_flags(ts, o);
  ts->add_option("--seq-len", o.seq_len)->capture_default_str();
  ts->add_option("--window", o.window)->capture_default_str();
  ts->add_option("--threads", o.threads, "0 = hardware concurrency")->capture_default_str();
  seed(ts);
  out(ts, "timescale CSV");

  auto* re = app.add_subcommand("replay", "rerun a command from its manifest");
  re->add_option("--manifest", o.manifest)->required();

  std::vector<const char*> cargv;
  for (const auto& a : argv) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  return dispatch(app, o, argv);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(std::vector<std::string>(argv, argv + argc));
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << '\n';
    return 3;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: bad manifest: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
