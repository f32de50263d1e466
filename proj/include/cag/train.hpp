#pragma once

// Run configuration, corpus files, vocabulary, the training loop and
// evaluation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "cag/decoder.hpp"
#include "cag/model.hpp"
#include "cag/synthdial.hpp"
#include "json.hpp"

namespace cag {

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

struct RunConfig {
  std::size_t d = 64;
  std::size_t d_w = 32;
  std::size_t k = 8;
  std::size_t t = 3;
  Variant variant = Variant::kCag;
  std::vector<std::string> ablations;
  double lr = 4e-4;
  double lr_decay = 0.5;
  std::size_t lr_decay_every = 10;
  std::size_t epochs = 10;
  double dropout = 0.3;
  std::uint64_t seed = 13;
  std::size_t batch = 1;  // rounds per optimizer step
  std::size_t min_count = 1;
  std::size_t max_caption = 40;
  std::size_t max_question = 20;
  std::size_t max_answer = 20;
  std::string corpus;  // paths are not part of the hash
  std::string out;

  ModeFlags flags() const {
    ModeFlags f;
    f.variant = variant;
    f.k = k;
    f.t = t;
    for (const auto& a : ablations) f.apply_ablations(a);
    return f;
  }

  void validate() const {
    if (d == 0 || d_w == 0) throw std::invalid_argument("config: d and d_w must be positive");
    if (k == 0) throw std::invalid_argument("config: K must be at least 1");
    if (batch == 0) throw std::invalid_argument("config: batch must be at least 1");
    if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("config: dropout must lie in [0, 1)");
    if (min_count == 0) throw std::invalid_argument("config: min_count must be at least 1");
    flags();  // rejects unknown ablation names
  }

  /// Fields that determine model behaviour, with sorted keys.
  nlohmann::json model_json() const {
    return nlohmann::json{{"d", d},
                          {"d_w", d_w},
                          {"K", k},
                          {"T", t},
                          {"variant", variant_name(variant)},
                          {"ablations", ablations},
                          {"lr", lr},
                          {"lr_decay", lr_decay},
                          {"lr_decay_every", lr_decay_every},
                          {"epochs", epochs},
                          {"dropout", dropout},
                          {"seed", seed},
                          {"batch", batch},
                          {"min_count", min_count},
                          {"max_caption", max_caption},
                          {"max_question", max_question},
                          {"max_answer", max_answer}};
  }

  nlohmann::json to_json() const {
    nlohmann::json j = model_json();
    j["corpus"] = corpus;
    j["out"] = out;
    return j;
  }

  std::uint64_t hash() const { return fnv1a64(model_json().dump()); }

  static RunConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known{"d",          "d_w",         "K",         "T",
                                                "variant",    "ablations",   "lr",        "lr_decay",
                                                "lr_decay_every", "epochs",  "dropout",   "seed",
                                                "batch",      "min_count",   "max_caption", "max_question",
                                                "max_answer", "corpus",      "out"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find(known.begin(), known.end(), it.key()) == known.end())
        throw std::invalid_argument("config: unknown field '" + it.key() + "'");
    RunConfig c;
    c.d = j.value("d", c.d);
    c.d_w = j.value("d_w", c.d_w);
    c.k = j.value("K", c.k);
    c.t = j.value("T", c.t);
    c.variant = parse_variant(j.value("variant", std::string("cag")));
    c.ablations = j.value("ablations", c.ablations);
    c.lr = j.value("lr", c.lr);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
    c.epochs = j.value("epochs", c.epochs);
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
    c.batch = j.value("batch", c.batch);
    c.min_count = j.value("min_count", c.min_count);
    c.max_caption = j.value("max_caption", c.max_caption);
    c.max_question = j.value("max_question", c.max_question);
    c.max_answer = j.value("max_answer", c.max_answer);
    c.corpus = j.value("corpus", c.corpus);
    c.out = j.value("out", c.out);
    c.validate();
    return c;
  }

  ModelConfig model_config(std::size_t vocab_size, std::size_t d_v) const {
    ModelConfig m;
    m.d = d;
    m.d_w = d_w;
    m.d_v = d_v;
    m.vocab = vocab_size;
    m.flags = flags();
    m.dropout = dropout;
    m.max_caption = max_caption;
    m.max_question = max_question;
    m.max_answer = max_answer;
    return m;
  }
};

// ---------------------------------------------------------------------------
// Corpus files

namespace fs = std::filesystem;

inline constexpr const char* kSplits[] = {"train", "val", "test"};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << bytes;
  if (!out) throw std::runtime_error("write failed for " + p.string());
}

inline std::string split_jsonl(const std::vector<synth::DialogInstance>& split, const synth::Attributes& a) {
  std::string s;
  for (const auto& d : split) {
    s += synth::to_json(d, a).dump();
    s += '\n';
  }
  return s;
}

/// Writes manifest.json plus one JSON-lines file per split. An existing
/// corpus in `dir` is only replaced with `force`.
inline void write_corpus(const fs::path& dir, const synth::Corpus& c, bool force = false) {
  if (!force)
    for (const char* name : {"manifest.json", "train.jsonl", "val.jsonl", "test.jsonl"})
      if (fs::exists(dir / name))
        throw std::runtime_error("output " + (dir / name).string() + " exists; pass --force to overwrite");
  fs::create_directories(dir);
  write_file(dir / "manifest.json", nlohmann::json(c.manifest).dump(2) + "\n");
  write_file(dir / "train.jsonl", split_jsonl(c.train, c.manifest.attributes));
  write_file(dir / "val.jsonl", split_jsonl(c.val, c.manifest.attributes));
  write_file(dir / "test.jsonl", split_jsonl(c.test, c.manifest.attributes));
}

inline std::vector<synth::DialogInstance> read_split(const fs::path& file, const synth::Attributes& a) {
  std::vector<synth::DialogInstance> out;
  std::istringstream in(read_file(file));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(synth::dialog_from_json(nlohmann::json::parse(line), a));
    } catch (const std::exception& e) {
      throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline synth::Corpus read_corpus(const fs::path& dir) {
  synth::Corpus c;
  c.manifest = nlohmann::json::parse(read_file(dir / "manifest.json")).get<synth::CorpusManifest>();
  c.train = read_split(dir / "train.jsonl", c.manifest.attributes);
  c.val = read_split(dir / "val.jsonl", c.manifest.attributes);
  c.test = read_split(dir / "test.jsonl", c.manifest.attributes);
  return c;
}

/// Tokens of every text field of the split, for vocabulary counting.
inline std::map<std::string, std::size_t> token_counts(const std::vector<synth::DialogInstance>& split) {
  std::map<std::string, std::size_t> counts;
  auto add = [&](const synth::Tokens& t) {
    for (const auto& w : t) ++counts[w];
  };
  for (const auto& d : split) {
    add(d.caption);
    for (const auto& r : d.history) {
      add(r.question);
      add(r.answer);
    }
    add(d.current.question);
    for (const auto& c : d.candidates) add(c);
  }
  return counts;
}

inline Vocab build_vocab(const synth::Corpus& c, std::size_t min_count) {
  return Vocab::from_counts(token_counts(c.train), min_count);
}

inline DialogTensors to_tensors(const synth::DialogInstance& d, const Vocab& v, const ModelConfig& cfg) {
  DialogTensors x;
  const std::size_t n = d.scene.objects.size();
  if (n == 0) throw std::invalid_argument("dialog " + std::to_string(d.id) + " has no objects");
  x.features = Array(cfg.d_v, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& f = d.scene.objects[i].feature;
    if (f.size() != cfg.d_v)
      throw std::invalid_argument("dialog " + std::to_string(d.id) + ": object feature dimension " +
                                  std::to_string(f.size()) + " does not match d_v=" + std::to_string(cfg.d_v));
    for (std::size_t k = 0; k < cfg.d_v; ++k) x.features(k, i) = f[k];
  }
  x.caption = v.encode(d.caption, cfg.max_caption);
  for (const auto& r : d.history) {
    auto q = v.encode(r.question, cfg.max_question);
    auto a = v.encode(r.answer, cfg.max_answer);
    q.insert(q.end(), a.begin(), a.end());
    x.rounds.push_back(std::move(q));
  }
  x.question = v.encode(d.current.question, cfg.max_question);
  for (const auto& c : d.candidates) x.candidates.push_back(v.encode(c, cfg.max_answer));
  x.gt = d.gt;
  return x;
}

inline std::vector<DialogTensors> to_tensors(const std::vector<synth::DialogInstance>& split, const Vocab& v,
                                             const ModelConfig& cfg) {
  std::vector<DialogTensors> out;
  out.reserve(split.size());
  for (const auto& d : split) out.push_back(to_tensors(d, v, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  RankReport report;
  std::vector<std::vector<double>> logits;
  std::vector<std::size_t> ranks;
};

/// Eval-mode forward over every instance. Instances are spread over worker
/// threads; results are reduced in instance order.
inline Evaluation evaluate(const ModelParams& p, const std::vector<DialogTensors>& data, const ModeFlags& flags,
                           std::size_t threads = 0) {
  Evaluation ev;
  ev.logits.resize(data.size());
  ev.ranks.resize(data.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<std::size_t>(threads, std::max<std::size_t>(1, data.size()));
  auto work = [&](std::size_t begin, std::size_t stride) {
    NoGradGuard no_grad;
    for (std::size_t i = begin; i < data.size(); i += stride) {
      ForwardResult r = forward(p, data[i], flags);
      ev.logits[i] = r.logit_values();
      ev.ranks[i] = rank_of(ev.logits[i], data[i].gt);
    }
  };
  if (threads <= 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(work, w, threads);
    for (auto& t : pool) t.join();
  }
  ev.report = report_from_ranks(ev.ranks);
  return ev;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  RankReport val;
  double lr = 0.0;
  std::size_t skipped = 0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"epoch", epoch},   {"loss", loss},   {"MRR", val.mrr}, {"R@1", val.r1},
                          {"R@5", val.r5},    {"R@10", val.r10}, {"Mean", val.mean_rank}, {"lr", lr}};
  }
};

struct TrainResult {
  ModelConfig model;
  Vocab vocab;
  ModelParams best;
  ModelParams last;
  OptimState optim;
  std::vector<EpochLog> log;
  std::optional<std::size_t> best_epoch;
  double best_mrr = -1.0;
};

/// Checks that the corpus can feed a model built from `cfg`.
inline void check_corpus(const synth::Corpus& c) {
  if (c.train.empty()) throw std::invalid_argument("corpus: training split is empty");
  const std::size_t d_v = c.manifest.feature_dim();
  for (const auto* split : {&c.train, &c.val, &c.test})
    for (const auto& d : *split)
      for (const auto& o : d.scene.objects)
        if (o.feature.size() != d_v)
          throw std::invalid_argument("corpus: dialog " + std::to_string(d.id) + " has feature dimension " +
                                      std::to_string(o.feature.size()) + ", manifest implies " +
                                      std::to_string(d_v));
}

/// Adam on the N-pair loss with the step-decay schedule. Deterministic given
/// cfg.seed; keeps the parameters with the best validation MRR.
inline TrainResult train(const synth::Corpus& corpus, const RunConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  check_corpus(corpus);
  TrainResult res;
  res.vocab = build_vocab(corpus, cfg.min_count);
  res.model = cfg.model_config(res.vocab.size(), corpus.manifest.feature_dim());
  const ModeFlags flags = res.model.flags;

  const auto train_data = to_tensors(corpus.train, res.vocab, res.model);
  const auto val_data = to_tensors(corpus.val.empty() ? corpus.train : corpus.val, res.vocab, res.model);

  Rng init_rng{cfg.seed, 1};
  ModelParams params = ModelParams::init(res.model, init_rng);
  const auto named = params.named();
  AdamOptions opts;
  opts.lr = cfg.lr;
  opts.decay = cfg.lr_decay;
  opts.decay_every = cfg.lr_decay_every;
  res.optim = OptimState(opts, named);
  res.best = params.clone();

  std::vector<std::size_t> order(train_data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    res.optim.epoch = epoch;
    Rng order_rng{cfg.seed, 2, epoch};
    Rng drop_rng{cfg.seed, 3, epoch};
    order_rng.shuffle(order);
    RunMode mode{true, res.model.keep_prob(), &drop_rng};
    const std::size_t skipped_before = res.optim.skipped;

    double total = 0.0;
    std::size_t in_batch = 0;
    params.zero_grad();
    for (std::size_t i : order) {
      ForwardResult r = forward(params, train_data[i], flags, mode);
      total += r.loss.item();
      backward(cfg.batch == 1 ? r.loss : scale(r.loss, inv_batch));
      if (++in_batch == cfg.batch) {
        adam_step(res.optim, named);
        params.zero_grad();
        in_batch = 0;
      }
    }
    if (in_batch > 0) adam_step(res.optim, named);

    EpochLog log;
    log.epoch = epoch;
    log.loss = total / static_cast<double>(train_data.size());
    log.lr = res.optim.lr();
    log.val = evaluate(params, val_data, flags).report;
    log.skipped = res.optim.skipped - skipped_before;
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.val.mrr > res.best_mrr) {
      res.best_mrr = log.val.mrr;
      res.best_epoch = epoch;
      res.best = params.clone();
    }
  }
  res.optim.epoch = cfg.epochs;
  res.last = params;
  return res;
}

inline std::string log_jsonl(const std::vector<EpochLog>& log) {
  std::string s;
  for (const auto& e : log) s += e.to_json().dump() + "\n";
  return s;
}

}  // namespace cag
