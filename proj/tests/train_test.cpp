#include <gtest/gtest.h>

#include "cag/cag.hpp"

using namespace cag;

namespace {

synth::Corpus tiny_corpus(std::size_t train, std::size_t val) {
  synth::CorpusManifest m;
  m.seed = 8;
  m.train = train;
  m.val = val;
  m.test = 0;
  return synth::generate_corpus(m);
}

RunConfig tiny_config() {
  RunConfig c;
  c.d = 8;
  c.d_w = 6;
  c.k = 3;
  c.t = 2;
  c.epochs = 2;
  return c;
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndHash) {
  RunConfig c = tiny_config();
  c.ablations = {"no_g_att"};
  c.corpus = "/somewhere";
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  RunConfig moved = c;
  moved.corpus = "/elsewhere";
  EXPECT_EQ(moved.hash(), c.hash());
  moved.d = 9;
  EXPECT_NE(moved.hash(), c.hash());
  EXPECT_THROW(RunConfig::from_json({{"dd", 3}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json({{"ablations", {"no_brain"}}}), std::invalid_argument);
  EXPECT_TRUE(c.flags().no_g_att);
}

TEST(Train, SingleInstanceMemorizes) {
  synth::Corpus c = tiny_corpus(1, 0);
  RunConfig cfg = tiny_config();
  cfg.dropout = 0.0;
  cfg.lr = 1e-2;
  const Vocab v = build_vocab(c, 1);
  const ModelConfig mc = cfg.model_config(v.size(), c.manifest.feature_dim());
  Rng rng(1);
  ModelParams p = ModelParams::init(mc, rng);
  const auto named = p.named();
  OptimState st(AdamOptions{cfg.lr, 0.9, 0.999, 1e-8, 0.5, 10}, named);
  const DialogTensors x = to_tensors(c.train[0], v, mc);
  double first = 0, last = 0;
  for (int step = 0; step < 50; ++step) {
    p.zero_grad();
    const ForwardResult r = forward(p, x, mc.flags);
    if (step == 0) first = r.loss.item();
    last = r.loss.item();
    backward(r.loss);
    adam_step(st, named);
  }
  EXPECT_LT(last, first);
}

TEST(Train, SameSeedSameLog) {
  const synth::Corpus c = tiny_corpus(20, 10);
  const RunConfig cfg = tiny_config();
  const TrainResult a = train(c, cfg), b = train(c, cfg);
  EXPECT_EQ(log_jsonl(a.log), log_jsonl(b.log));
  ASSERT_EQ(a.log.size(), 2u);
  RunConfig other = cfg;
  other.seed = 99;
  EXPECT_NE(log_jsonl(train(c, other).log), log_jsonl(a.log));
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const synth::Corpus c = tiny_corpus(5, 2);
  RunConfig cfg = tiny_config();
  cfg.epochs = 0;
  const TrainResult r = train(c, cfg);
  EXPECT_TRUE(r.log.empty());
  Rng rng{cfg.seed, 1};
  const ModelParams init = ModelParams::init(r.model, rng);
  EXPECT_EQ(init.named()[0].tensor.value(), r.best.named()[0].tensor.value());
}

TEST(Train, LearningRateScheduleLogged) {
  const synth::Corpus c = tiny_corpus(3, 2);
  RunConfig cfg = tiny_config();
  cfg.epochs = 12;
  cfg.d = 4;
  cfg.d_w = 3;
  const TrainResult r = train(c, cfg);
  EXPECT_EQ(r.log[9].lr, 4e-4);
  EXPECT_EQ(r.log[10].lr, 2e-4);
}

TEST(Train, RejectsEmptyCorpusAndDimensionMismatch) {
  synth::Corpus empty = tiny_corpus(0, 2);
  EXPECT_THROW(train(empty, tiny_config()), std::invalid_argument);
  synth::Corpus bad = tiny_corpus(3, 1);
  bad.train[1].scene.objects[0].feature.pop_back();
  EXPECT_THROW(train(bad, tiny_config()), std::invalid_argument);
}

TEST(Evaluate, ThreadCountDoesNotChangeResults) {
  const synth::Corpus c = tiny_corpus(2, 30);
  const RunConfig cfg = tiny_config();
  const Vocab v = build_vocab(c, 1);
  const ModelConfig mc = cfg.model_config(v.size(), c.manifest.feature_dim());
  Rng rng(3);
  const ModelParams p = ModelParams::init(mc, rng);
  const auto data = to_tensors(c.val, v, mc);
  const Evaluation one = evaluate(p, data, mc.flags, 1), four = evaluate(p, data, mc.flags, 4);
  EXPECT_EQ(one.logits, four.logits);
  EXPECT_EQ(one.report.mrr, four.report.mrr);
  EXPECT_EQ(one.report.r10, 1.0);
}

TEST(Trace, ShapesAndSimplexes) {
  const synth::Corpus c = tiny_corpus(2, 3);
  RunConfig cfg = tiny_config();
  cfg.t = 3;
  const Vocab v = build_vocab(c, 1);
  const ModelConfig mc = cfg.model_config(v.size(), c.manifest.feature_dim());
  Rng rng(4);
  const ModelParams p = ModelParams::init(mc, rng);
  const auto x = to_tensors(c.val[0], v, mc);
  NoGradGuard guard;
  const AttentionTrace t = make_trace(forward(p, x, mc.flags), x.gt);
  EXPECT_NO_THROW(validate_trace(t, x.features.cols(), cfg.k, 3));
  ASSERT_EQ(t.steps.size(), 3u);
  for (const auto& s : t.steps) {
    EXPECT_EQ(s.top_objects.size(), 2u);
    for (const auto& nb : s.neighbors) EXPECT_EQ(nb.size(), cfg.k);
  }
  const auto j = trace_json(t);
  EXPECT_EQ(j.at("steps").size(), 3u);
  EXPECT_EQ(j.at("steps")[0].at("S")[0].size(), cfg.k);

  AttentionTrace broken = t;
  broken.alpha_g[0] += 1e-6;
  EXPECT_THROW(validate_trace(broken, x.features.cols(), cfg.k, 3), std::logic_error);
  EXPECT_THROW(validate_trace(t, x.features.cols(), cfg.k, 2), std::logic_error);
}
