#pragma once

// The full dialog model: encoders, context graph, fusion and candidate
// scoring, plus the container of every learnable weight.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/decoder.hpp"
#include "cag/graph.hpp"
#include "cag/text.hpp"

namespace cag {

struct ModelConfig {
  std::size_t d = 512;    // hidden size
  std::size_t d_w = 300;  // word embedding size
  std::size_t d_v = 0;    // raw object feature size
  std::size_t vocab = 0;
  ModeFlags flags;
  double dropout = 0.3;  // drop ratio; keep probability is 1 - dropout
  std::size_t max_caption = 40;
  std::size_t max_question = 20;
  std::size_t max_answer = 20;

  double keep_prob() const { return 1.0 - dropout; }

  void validate() const {
    if (d == 0 || d_w == 0 || d_v == 0 || vocab < 2)
      throw std::invalid_argument("ModelConfig: dimensions d, d_w, d_v and vocab must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("ModelConfig: dropout must lie in [0, 1)");
    if (flags.k == 0) throw std::invalid_argument("ModelConfig: K must be at least 1");
  }
};

/// One image-grounded question with every text field already mapped to ids.
struct DialogTensors {
  Array features;  // d_v x n raw object features
  std::vector<std::size_t> caption;
  std::vector<std::vector<std::size_t>> rounds;  // "q a" token ids per history round
  std::vector<std::size_t> question;
  std::vector<std::vector<std::size_t>> candidates;
  std::size_t gt = 0;
};

struct ModelParams {
  Tensor embedding;  // vocab x d_w
  LstmWeights question_lstm;
  LstmWeights history_lstm;  // also encodes candidate answers
  Tensor visual_w;           // d x d_v
  Tensor visual_b;           // d x 1
  HistoryAttentionWeights history;
  std::vector<QuestionCommandWeights> commands;  // one per iteration step
  GraphParams graph;
  Tensor sentence_to_command;  // d_w x d, used by the no_q_att ablation

  static ModelParams init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d = cfg.d, dw = cfg.d_w;
    auto uniform = [&](std::size_t rows, std::size_t cols, double r) {
      Array a(rows, cols);
      for (double& v : a.data()) v = rng.uniform(-r, r);
      return Tensor::parameter(std::move(a));
    };
    auto fan_in = [&](std::size_t rows, std::size_t cols) {
      return uniform(rows, cols, 1.0 / std::sqrt(static_cast<double>(cols)));
    };
    ModelParams p;
    p.embedding = uniform(cfg.vocab, dw, 0.08);
    p.question_lstm = LstmWeights::init(dw, d, rng);
    p.history_lstm = LstmWeights::init(dw, d, rng);
    p.visual_w = fan_in(d, cfg.d_v);
    p.visual_b = uniform(d, 1, 1.0 / std::sqrt(static_cast<double>(cfg.d_v)));
    p.history = {fan_in(d, d), fan_in(d, d), fan_in(1, d)};
    for (std::size_t t = 0; t < cfg.flags.t; ++t) p.commands.push_back({fan_in(d, d), fan_in(d, d), fan_in(1, d)});
    GraphParams& g = p.graph;
    g.w1 = fan_in(d, 2 * d);
    g.w2 = fan_in(d, 2 * d);
    g.w3 = fan_in(d, dw);
    g.w3_dual = fan_in(d, dw);
    g.w4 = fan_in(d, 2 * d);
    g.w5 = fan_in(d, dw);
    g.w6 = fan_in(d, 2 * d);
    g.w_g1 = fan_in(d, d);
    g.w_g2 = fan_in(d, 2 * d);
    g.p_g = fan_in(1, d);
    g.w_e = fan_in(d, 4 * d);
    p.sentence_to_command = fan_in(dw, d);
    return p;
  }

  /// Every learnable tensor under a stable name, in a fixed order.
  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out{
        {"embedding", embedding},
        {"question_lstm.w_input", question_lstm.w_input},
        {"question_lstm.w_hidden", question_lstm.w_hidden},
        {"question_lstm.bias", question_lstm.bias},
        {"history_lstm.w_input", history_lstm.w_input},
        {"history_lstm.w_hidden", history_lstm.w_hidden},
        {"history_lstm.bias", history_lstm.bias},
        {"visual.w", visual_w},
        {"visual.b", visual_b},
        {"history.w_q", history.w_question},
        {"history.w_h", history.w_history},
        {"history.p_h", history.projection},
    };
    for (std::size_t t = 0; t < commands.size(); ++t) {
      const std::string prefix = "command." + std::to_string(t + 1) + ".";
      out.push_back({prefix + "w_f1", commands[t].w_tanh});
      out.push_back({prefix + "w_f2", commands[t].w_gate});
      out.push_back({prefix + "p_q", commands[t].projection});
    }
    out.insert(out.end(), {
                              {"graph.w1", graph.w1},
                              {"graph.w2", graph.w2},
                              {"graph.w3", graph.w3},
                              {"graph.w3_dual", graph.w3_dual},
                              {"graph.w4", graph.w4},
                              {"graph.w5", graph.w5},
                              {"graph.w6", graph.w6},
                              {"graph.w_g1", graph.w_g1},
                              {"graph.w_g2", graph.w_g2},
                              {"graph.p_g", graph.p_g},
                              {"graph.w_e", graph.w_e},
                              {"sentence_to_command", sentence_to_command},
                          });
    return out;
  }

  void zero_grad() const {
    for (auto& p : named()) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
  }

  /// Deep copy of the values; gradients are not copied.
  ModelParams clone() const {
    ModelParams c = *this;
    c.embedding = Tensor::parameter(embedding.value());
    c.question_lstm = {Tensor::parameter(question_lstm.w_input.value()),
                       Tensor::parameter(question_lstm.w_hidden.value()),
                       Tensor::parameter(question_lstm.bias.value())};
    c.history_lstm = {Tensor::parameter(history_lstm.w_input.value()),
                      Tensor::parameter(history_lstm.w_hidden.value()),
                      Tensor::parameter(history_lstm.bias.value())};
    c.visual_w = Tensor::parameter(visual_w.value());
    c.visual_b = Tensor::parameter(visual_b.value());
    c.history = {Tensor::parameter(history.w_question.value()), Tensor::parameter(history.w_history.value()),
                 Tensor::parameter(history.projection.value())};
    for (auto& cmd : c.commands)
      cmd = {Tensor::parameter(cmd.w_tanh.value()), Tensor::parameter(cmd.w_gate.value()),
             Tensor::parameter(cmd.projection.value())};
    GraphParams& g = c.graph;
    for (Tensor* t : {&g.w1, &g.w2, &g.w3, &g.w3_dual, &g.w4, &g.w5, &g.w6, &g.w_g1, &g.w_g2, &g.p_g, &g.w_e})
      *t = Tensor::parameter(t->value());
    c.sentence_to_command = Tensor::parameter(sentence_to_command.value());
    return c;
  }
};

struct ForwardResult {
  Tensor visual;  // d x n lifted object features
  Tensor question_hidden;
  Tensor sentence;  // q_s
  HistoryAttention history;
  IterationResult graph;
  GraphAttention pooled;
  Tensor fused;
  Tensor candidates;  // d x C
  Tensor logits;      // C x 1
  Tensor loss;        // scalar

  std::vector<double> logit_values() const { return logits.value().values(); }
};

/// Encodes the caption and each history round with the history LSTM; column 0
/// is the caption.
inline Tensor encode_history(const ModelParams& p, const DialogTensors& x) {
  std::vector<Tensor> cols;
  cols.reserve(x.rounds.size() + 1);
  cols.push_back(encode_sentence(x.caption, p.embedding, p.history_lstm));
  for (const auto& r : x.rounds) cols.push_back(encode_sentence(r, p.embedding, p.history_lstm));
  return concat(cols, 1);
}

inline Tensor encode_candidates(const ModelParams& p, const DialogTensors& x) {
  if (x.candidates.size() < 2) throw std::invalid_argument("encode_candidates: need at least two candidates");
  std::vector<Tensor> cols;
  cols.reserve(x.candidates.size());
  for (const auto& c : x.candidates) cols.push_back(encode_sentence(c, p.embedding, p.history_lstm));
  return concat(cols, 1);
}

/// tanh(Wv F + b 1^T): raw object features to d-dim visual nodes.
inline Tensor lift_visual(const ModelParams& p, const Array& features) {
  const Tensor f = Tensor::constant(features);
  return tanh(add(matmul(p.visual_w, f), broadcast_cols(p.visual_b, features.cols())));
}

inline ForwardResult forward(const ModelParams& p, const DialogTensors& x, const ModeFlags& flags,
                             const RunMode& mode = {}) {
  if (!flags.no_q_att && flags.steps() > p.commands.size())
    throw std::invalid_argument("forward: " + std::to_string(flags.steps()) + " steps requested but only " +
                                std::to_string(p.commands.size()) + " command weight sets exist");
  if (x.features.rows() != p.visual_w.cols())
    throw ShapeError("forward: object features have " + std::to_string(x.features.rows()) +
                     " rows, model expects d_v=" + std::to_string(p.visual_w.cols()));
  if (x.gt >= x.candidates.size()) throw std::out_of_range("forward: ground truth index outside candidates");

  ForwardResult r;
  r.visual = lift_visual(p, x.features);

  QuestionInputs q;
  q.words = embed_tokens(x.question, p.embedding);
  q.is_pad = pad_mask(x.question);
  q.hidden = lstm_encode(q.words, p.question_lstm, q.is_pad);
  q.sentence = column(q.hidden, q.hidden.cols() - 1);
  r.question_hidden = q.hidden;
  r.sentence = q.sentence;

  r.history = history_attention(q.sentence, encode_history(p, x), p.history, mode);
  r.graph = iterate(r.visual, r.history.u, q, p.graph, p.commands, p.sentence_to_command, flags, mode);
  r.pooled = graph_attention(r.graph.final_state().nodes, q.sentence, p.graph, flags.no_g_att, mode);
  r.fused = fuse(r.pooled.embedding, r.history.u, q.sentence, p.graph.w_e, mode);
  r.candidates = encode_candidates(p, x);
  r.logits = score_candidates(r.fused, r.candidates);
  r.loss = npair_loss(r.logits, x.gt);
  return r;
}

}  // namespace cag
