#pragma once

// Token vocabulary, word embeddings, LSTM sequence encoding, question-guided
// attention over dialog history, and per-step word-level question commands.

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cag/tensor.hpp"

namespace cag {

class Vocab {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocab() : tokens_{kPadToken, kUnkToken} { reindex(); }

  /// Builds from an ordered token list; the two reserved entries come first.
  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2 || tokens_[kPad] != kPadToken || tokens_[kUnk] != kUnkToken)
      throw std::invalid_argument("Vocab: token list must start with <pad>, <unk>");
    reindex();
    if (index_.size() != tokens_.size()) throw std::invalid_argument("Vocab: duplicate tokens");
  }

  /// Keeps tokens seen at least `min_count` times, in lexicographic order.
  static Vocab from_counts(const std::map<std::string, std::size_t>& counts, std::size_t min_count) {
    std::vector<std::string> tokens{kPadToken, kUnkToken};
    for (const auto& [tok, n] : counts)
      if (n >= min_count && tok != kPadToken && tok != kUnkToken) tokens.push_back(tok);
    return Vocab(std::move(tokens));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }

  std::size_t id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  std::vector<std::size_t> encode(std::span<const std::string> toks, std::size_t max_len = 0) const {
    std::vector<std::size_t> ids;
    for (const auto& t : toks) {
      if (max_len != 0 && ids.size() == max_len) break;
      ids.push_back(id(t));
    }
    if (ids.empty()) ids.push_back(kPad);
    return ids;
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Train/eval switch plus the dropout stream used in training.
struct RunMode {
  bool train = false;
  double keep_prob = 1.0;
  Rng* rng = nullptr;

  Tensor drop(const Tensor& t) const { return dropout(t, keep_prob, rng, train); }
};

/// Column j is the embedding of ids[j]; PAD gives a zero column.
inline Tensor embed_tokens(std::span<const std::size_t> ids, const Tensor& table) {
  return embedding(table, ids, Vocab::kPad);
}

inline std::vector<bool> pad_mask(std::span<const std::size_t> ids) {
  std::vector<bool> mask(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = ids[i] == Vocab::kPad;
  return mask;
}

/// Single-layer LSTM. Gate rows are stacked as [input; forget; cell; output].
struct LstmWeights {
  Tensor w_input;   // 4d x d_in
  Tensor w_hidden;  // 4d x d
  Tensor bias;      // 4d x 1

  std::size_t hidden() const { return w_hidden.cols(); }
  std::size_t input() const { return w_input.cols(); }

  static LstmWeights init(std::size_t d_in, std::size_t d, Rng& rng) {
    const double r = 1.0 / std::sqrt(static_cast<double>(d));
    auto uniform = [&](std::size_t rows, std::size_t cols) {
      Array a(rows, cols);
      for (double& v : a.data()) v = rng.uniform(-r, r);
      return Tensor::parameter(std::move(a));
    };
    LstmWeights w;
    w.w_input = uniform(4 * d, d_in);
    w.w_hidden = uniform(4 * d, d);
    w.bias = uniform(4 * d, 1);
    return w;
  }
};

/// Encodes the columns of `seq` (d_in x m) into hidden states (d x m) from a
/// zero initial state. Positions flagged in `is_pad` carry the previous
/// state forward unchanged.
inline Tensor lstm_encode(const Tensor& seq, const LstmWeights& w, const std::vector<bool>& is_pad = {}) {
  const std::size_t m = seq.cols();
  const std::size_t d = w.hidden();
  if (m == 0) throw ShapeError("lstm_encode: empty sequence");
  if (seq.rows() != w.input())
    throw ShapeError("lstm_encode: input shape " + shape_string(seq.shape()) + " incompatible with weights " +
                     shape_string(w.w_input.shape()));
  if (w.w_hidden.rows() != 4 * d || w.bias.rows() != 4 * d)
    throw ShapeError("lstm_encode: gate weights " + shape_string(w.w_hidden.shape()) + " and bias " +
                     shape_string(w.bias.shape()) + " disagree");
  if (!is_pad.empty() && is_pad.size() != m)
    throw ShapeError("lstm_encode: pad mask length " + std::to_string(is_pad.size()) + " vs sequence " +
                     std::to_string(m));

  const Tensor projected = matmul(w.w_input, seq);  // 4d x m
  Tensor h = Tensor::constant(Array(d, 1));
  Tensor c = Tensor::constant(Array(d, 1));
  bool started = false;
  std::vector<Tensor> outputs;
  outputs.reserve(m);
  for (std::size_t t = 0; t < m; ++t) {
    if (!is_pad.empty() && is_pad[t]) {
      outputs.push_back(h);
      continue;
    }
    Tensor gates = add(column(projected, t), w.bias);
    if (started) gates = add(gates, matmul(w.w_hidden, h));
    const Tensor in_gate = sigmoid(slice_rows(gates, 0, d));
    const Tensor forget_gate = sigmoid(slice_rows(gates, d, 2 * d));
    const Tensor cell = tanh(slice_rows(gates, 2 * d, 3 * d));
    const Tensor out_gate = sigmoid(slice_rows(gates, 3 * d, 4 * d));
    c = started ? add(hadamard(forget_gate, c), hadamard(in_gate, cell)) : hadamard(in_gate, cell);
    h = hadamard(out_gate, tanh(c));
    started = true;
    outputs.push_back(h);
  }
  return concat(outputs, 1);
}

/// Embeds and encodes a token sequence; returns the hidden state after the
/// last valid token.
inline Tensor encode_sentence(std::span<const std::size_t> ids, const Tensor& table, const LstmWeights& w) {
  const Tensor hidden = lstm_encode(embed_tokens(ids, table), w, pad_mask(ids));
  return column(hidden, hidden.cols() - 1);
}

struct HistoryAttention {
  Tensor u;      // d x 1
  Tensor alpha;  // 1 x l
};

struct HistoryAttentionWeights {
  Tensor w_question;  // d x d
  Tensor w_history;   // d x d
  Tensor projection;  // 1 x d
};

/// Question-conditioned attention over history rounds:
/// z = tanh(Wq q 1^T + Wh U), alpha = softmax(P z), u = U alpha.
inline HistoryAttention history_attention(const Tensor& q_s, const Tensor& history,
                                          const HistoryAttentionWeights& w, const RunMode& mode = {}) {
  const std::size_t rounds = history.cols();
  if (rounds == 0) throw ShapeError("history_attention: empty history");
  if (q_s.cols() != 1 || q_s.rows() != history.rows())
    throw ShapeError("history_attention: question " + shape_string(q_s.shape()) + " vs history " +
                     shape_string(history.shape()));
  Tensor z = tanh(add(broadcast_cols(matmul(w.w_question, q_s), rounds), matmul(w.w_history, history)));
  z = mode.drop(z);
  HistoryAttention out;
  out.alpha = softmax(matmul(w.projection, z), 1);
  out.u = matmul(history, transpose(out.alpha));
  return out;
}

struct QuestionCommandWeights {
  Tensor w_tanh;      // d x d
  Tensor w_gate;      // d x d
  Tensor projection;  // 1 x d
};

struct QuestionCommand {
  std::size_t step = 0;
  Tensor alpha;    // 1 x m, zero on PAD positions
  Tensor command;  // d_w x 1
};

/// Step-t word attention over the question. `steps` holds one weight set per
/// iteration; t is 1-based.
inline QuestionCommand question_command(const Tensor& hidden, const Tensor& words, std::size_t t,
                                        std::span<const QuestionCommandWeights> steps,
                                        const std::vector<bool>& is_pad = {}, const RunMode& mode = {}) {
  if (t < 1 || t > steps.size())
    throw std::out_of_range("question_command: step " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps.size()) + "]");
  const std::size_t m = hidden.cols();
  if (words.cols() != m)
    throw ShapeError("question_command: hidden " + shape_string(hidden.shape()) + " vs words " +
                     shape_string(words.shape()));
  const QuestionCommandWeights& w = steps[t - 1];
  const Tensor gated = hadamard(tanh(matmul(w.w_tanh, hidden)), sigmoid(matmul(w.w_gate, hidden)));
  const Tensor z = mode.drop(l2_normalize(gated, 0));
  const Tensor logits = matmul(w.projection, z);  // 1 x m
  QuestionCommand out;
  out.step = t;
  if (is_pad.empty()) {
    out.alpha = softmax(logits, 1);
  } else {
    if (is_pad.size() != m) throw ShapeError("question_command: pad mask length mismatch");
    Array mask(1, m, 1.0);
    for (std::size_t j = 0; j < m; ++j)
      if (is_pad[j]) mask[j] = 0.0;
    out.alpha = masked_softmax(logits, 1, mask);
  }
  out.command = matmul(words, transpose(out.alpha));
  return out;
}

}  // namespace cag
