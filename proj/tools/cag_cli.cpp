// Command-line driver: corpus generation, training, evaluation and traces.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "cag/cag.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int cmd_gen(const std::string& manifest_path, const std::string& out, bool force) {
  const auto manifest = json::parse(cag::read_file(manifest_path)).get<cag::synth::CorpusManifest>();
  const auto corpus = cag::synth::generate_corpus(manifest);
  cag::write_corpus(out, corpus, force);

  std::map<std::string, std::size_t> mix;
  std::size_t pronoun = 0;
  for (const char* name : cag::kSplits)
    for (const auto& d : corpus.split(name)) {
      ++mix[cag::synth::kind_name(d.current.kind)];
      pronoun += d.current.pronoun() ? 1 : 0;
    }
  json summary{{"train", corpus.train.size()},
               {"val", corpus.val.size()},
               {"test", corpus.test.size()},
               {"question_kinds", mix},
               {"pronoun_questions", pronoun}};
  std::cout << summary.dump() << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& corpus_dir, const std::string& out) {
  cag::RunConfig cfg = cag::RunConfig::from_json(json::parse(cag::read_file(config_path)));
  if (const char* seed = std::getenv("CAG_SEED")) cfg.seed = std::stoull(seed);
  cfg.corpus = corpus_dir;
  cfg.out = out;
  const auto corpus = cag::read_corpus(corpus_dir);
  fs::create_directories(out);
  cag::write_file(fs::path(out) / "config.json", cfg.to_json().dump(2) + "\n");

  const fs::path log_path = fs::path(out) / "log.jsonl";
  cag::write_file(log_path, "");
  auto result = cag::train(corpus, cfg, [&](const cag::EpochLog& e) {
    const std::string line = e.to_json().dump();
    std::ofstream(log_path, std::ios::app) << line << '\n';
    std::cout << line << '\n' << std::flush;
  });
  cag::save_checkpoint(fs::path(out) / "best.ckpt", cfg, result.model, result.vocab, result.best, &result.optim);
  cag::save_checkpoint(fs::path(out) / "last.ckpt", cfg, result.model, result.vocab, result.last, &result.optim);
  return 0;
}

cag::synth::Corpus corpus_for(const cag::Checkpoint& ck, const std::string& override_dir) {
  const std::string dir = override_dir.empty() ? ck.config.corpus : override_dir;
  if (dir.empty()) throw std::invalid_argument("checkpoint records no corpus path; pass --corpus");
  auto corpus = cag::read_corpus(dir);
  if (corpus.manifest.feature_dim() != ck.model.d_v)
    throw std::invalid_argument("corpus object features have dimension " +
                                std::to_string(corpus.manifest.feature_dim()) + " but the checkpoint expects d_v=" +
                                std::to_string(ck.model.d_v));
  return corpus;
}

int cmd_eval(const std::string& ckpt_path, const std::string& split, const std::string& ablate,
             const std::string& corpus_dir, std::size_t threads) {
  const auto ck = cag::load_checkpoint(ckpt_path);
  const auto corpus = corpus_for(ck, corpus_dir);
  cag::ModeFlags flags = ck.model.flags;
  flags.apply_ablations(ablate);
  const auto data = cag::to_tensors(corpus.split(split), ck.vocab, ck.model);
  const auto ev = cag::evaluate(ck.params, data, flags, threads);
  json out{{"split", split},         {"count", ev.report.count}, {"Mean", ev.report.mean_rank},
           {"MRR", ev.report.mrr},   {"R@1", ev.report.r1},      {"R@5", ev.report.r5},
           {"R@10", ev.report.r10},  {"ablations", flags.ablation_names()},
           {"variant", cag::variant_name(flags.variant)}};
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_trace(const std::string& ckpt_path, std::size_t dialog, const std::string& out,
              const std::string& corpus_dir, const std::string& ablate) {
  const auto ck = cag::load_checkpoint(ckpt_path);
  const auto corpus = corpus_for(ck, corpus_dir);
  cag::ModeFlags flags = ck.model.flags;
  flags.apply_ablations(ablate);
  for (const char* split : cag::kSplits)
    for (const auto& d : corpus.split(split)) {
      if (d.id != dialog) continue;
      cag::NoGradGuard no_grad;
      const auto x = cag::to_tensors(d, ck.vocab, ck.model);
      const auto r = cag::forward(ck.params, x, flags);
      const auto trace = cag::make_trace(r, d.gt);
      cag::validate_trace(trace, d.scene.objects.size(), flags.k, flags.steps());
      json j = cag::trace_json(trace);
      j["dialog"] = d.id;
      j["split"] = split;
      j["question"] = d.current.question;
      j["candidates"] = d.candidates;
      j["K"] = flags.k;
      j["T"] = flags.steps();
      cag::write_file(out, j.dump(2) + "\n");
      std::cout << "wrote trace of dialog " << d.id << " (" << flags.steps() << " steps) to " << out << '\n';
      return 0;
    }
  throw std::invalid_argument("dialog id " + std::to_string(dialog) + " not found in any split");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware graph visual dialog toolkit"};
  app.require_subcommand(1);

  std::string manifest, out, config, corpus, ckpt, split = "val", ablate;
  bool force = false;
  std::size_t dialog = 0, threads = 0;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dialog corpus");
  gen->add_option("--manifest", manifest, "Corpus manifest JSON")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_flag("--force", force, "Overwrite an existing corpus");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "Run config JSON")->required();
  tr->add_option("--corpus", corpus, "Corpus directory")->required();
  tr->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  ev->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  ev->add_option("--split", split, "train, val or test")->required();
  ev->add_option("--ablate", ablate, "Comma separated ablations: no_infer,no_u,no_q_att,no_g_att");
  ev->add_option("--corpus", corpus, "Corpus directory (defaults to the one used for training)");
  ev->add_option("--threads", threads, "Worker threads (0 = hardware concurrency)");

  auto* trc = app.add_subcommand("trace", "Export the attention trace of one dialog");
  trc->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  trc->add_option("--dialog", dialog, "Dialog id")->required();
  trc->add_option("--out", out, "Output JSON file")->required();
  trc->add_option("--corpus", corpus, "Corpus directory (defaults to the one used for training)");
  trc->add_option("--ablate", ablate, "Comma separated ablations");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen(manifest, out, force);
    if (*tr) return cmd_train(config, corpus, out);
    if (*ev) return cmd_eval(ckpt, split, ablate, corpus, threads);
    if (*trc) return cmd_trace(ckpt, dialog, out, corpus, ablate);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
