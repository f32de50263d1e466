#pragma once

// Context-aware graph over image objects: nodes pair a fixed visual feature
// with a learned context vector. Each iteration the question command gates a
// directed adjacency matrix, every node keeps its K strongest incoming edges,
// aggregates the gated messages from those neighbors and rewrites its context
// half. A question-conditioned attention then pools the final nodes.

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/tensor.hpp"
#include "cag/text.hpp"

namespace cag {

enum class Variant { kCag, kDualQ };

inline const char* variant_name(Variant v) { return v == Variant::kCag ? "cag" : "dualq"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "cag") return Variant::kCag;
  if (s == "dualq") return Variant::kDualQ;
  throw std::invalid_argument("unknown variant '" + s + "' (expected cag or dualq)");
}

struct ModeFlags {
  Variant variant = Variant::kCag;
  bool no_infer = false;  // skip graph inference; the constructed graph is used as is
  bool no_u = false;      // initialize node contexts with zeros instead of u
  bool no_q_att = false;  // sentence-level question feature replaces the word commands
  bool no_g_att = false;  // mean pooling replaces graph attention
  std::size_t k = 8;
  std::size_t t = 3;

  std::size_t steps() const { return no_infer ? 0 : t; }

  /// Applies a comma separated list such as "no_g_att,no_u".
  void apply_ablations(const std::string& list) {
    std::size_t pos = 0;
    while (pos <= list.size()) {
      const std::size_t comma = list.find(',', pos);
      const std::string item = list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      if (item == "no_infer")
        no_infer = true;
      else if (item == "no_u")
        no_u = true;
      else if (item == "no_q_att")
        no_q_att = true;
      else if (item == "no_g_att")
        no_g_att = true;
      else if (!item.empty())
        throw std::invalid_argument("unknown ablation '" + item + "'");
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }

  std::vector<std::string> ablation_names() const {
    std::vector<std::string> out;
    if (no_infer) out.emplace_back("no_infer");
    if (no_u) out.emplace_back("no_u");
    if (no_q_att) out.emplace_back("no_q_att");
    if (no_g_att) out.emplace_back("no_g_att");
    return out;
  }
};

/// Graph weights. w1..w6 are single instances shared by every iteration.
struct GraphParams {
  Tensor w1;       // d x 2d
  Tensor w2;       // d x 2d
  Tensor w3;       // d x d_w
  Tensor w3_dual;  // d x d_w, gates the receiving side in the DualQ variant
  Tensor w4;       // d x 2d
  Tensor w5;       // d x d_w
  Tensor w6;       // d x 2d
  Tensor w_g1;     // d x d
  Tensor w_g2;     // d x 2d
  Tensor p_g;      // 1 x d
  Tensor w_e;      // d x 4d
};

struct GraphState {
  std::size_t step = 1;
  Tensor nodes;  // 2d x n, column i = [v_i; c_i]
  // Filled by advance() for this step:
  Tensor adjacency;                             // n x n, row i = incoming weights of node i
  std::vector<std::vector<std::size_t>> neighbors;  // S_i, ascending
  Array weights;                                // n x K normalized edge weights
  Tensor messages;                              // d x n, column i = M_i
  Tensor command;                               // d_w x 1

  std::size_t dim() const { return nodes.rows() / 2; }
  std::size_t size() const { return nodes.cols(); }
};

/// Initial graph: node i = [v_i; u], or [v_i; 0] with `zero_context`.
inline GraphState init_graph(const Tensor& visual, const Tensor& u, bool zero_context = false) {
  const std::size_t n = visual.cols();
  if (n == 0) throw std::invalid_argument("init_graph: graph needs at least one object");
  if (u.cols() != 1 || u.rows() != visual.rows())
    throw ShapeError("init_graph: context " + shape_string(u.shape()) + " incompatible with visual " +
                     shape_string(visual.shape()));
  const Tensor context = zero_context ? Tensor::constant(Array(visual.rows(), n)) : broadcast_cols(u, n);
  GraphState s;
  s.step = 1;
  s.nodes = concat({visual, context}, 0);
  return s;
}

/// A = (W1 N)^T ((W2 N) . (W3 q 1^T)); the DualQ variant also gates the left
/// factor with W3' q. Self-edges are kept.
inline Tensor adjacency(const Tensor& nodes, const Tensor& command, const GraphParams& p,
                        Variant variant = Variant::kCag) {
  const std::size_t n = nodes.cols();
  Tensor sending = hadamard(matmul(p.w2, nodes), broadcast_cols(matmul(p.w3, command), n));
  Tensor receiving = matmul(p.w1, nodes);
  if (variant == Variant::kDualQ)
    receiving = hadamard(receiving, broadcast_cols(matmul(p.w3_dual, command), n));
  return matmul(transpose(receiving), sending);
}

/// S_i = top-K indices of row i. K is clamped to n.
inline std::vector<std::vector<std::size_t>> select_neighbors(const Array& adj, std::size_t k) {
  if (k == 0) throw std::invalid_argument("select_neighbors: K must be at least 1");
  const std::size_t n = adj.rows();
  k = std::min(k, adj.cols());
  std::vector<std::vector<std::size_t>> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = topk_indices(adj.data().subspan(i * adj.cols(), adj.cols()), k);
  return out;
}

struct MessageResult {
  Array weights;     // n x K, B_{j->i} in neighbor order
  Tensor edge_mass;  // n x n, row i holds B over S_i and zeros elsewhere
  Tensor messages;   // d x n
};

/// B_i = softmax of A_i restricted to S_i; m_j = (W4 N_j) . (W5 q);
/// M_i = sum_{j in S_i} B_{j->i} m_j.
inline MessageResult message_passing(const Tensor& nodes, const Tensor& adj,
                                     const std::vector<std::vector<std::size_t>>& neighbors,
                                     const Tensor& command, const Tensor& w4, const Tensor& w5) {
  const std::size_t n = nodes.cols();
  if (adj.rows() != n || adj.cols() != n || neighbors.size() != n)
    throw ShapeError("message_passing: adjacency " + shape_string(adj.shape()) + " vs " + std::to_string(n) +
                     " nodes");
  Array mask(n, n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (neighbors[i].empty()) throw std::invalid_argument("message_passing: node without neighbors");
    k = std::max(k, neighbors[i].size());
    for (std::size_t j : neighbors[i]) mask(i, j) = 1.0;
  }
  MessageResult out;
  out.edge_mass = masked_softmax(adj, 1, mask);
  out.weights = Array(n, k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t s = 0; s < neighbors[i].size(); ++s) out.weights(i, s) = out.edge_mass(i, neighbors[i][s]);
  const Tensor msg = hadamard(matmul(w4, nodes), broadcast_cols(matmul(w5, command), n));
  out.messages = matmul(msg, transpose(out.edge_mass));
  return out;
}

/// c_i <- W6 [c_i; M_i]; the visual half of every node is copied unchanged.
inline GraphState update_nodes(const GraphState& state, const Tensor& messages, const Tensor& w6) {
  const std::size_t d = state.dim();
  const Tensor visual = slice_rows(state.nodes, 0, d);
  const Tensor context = slice_rows(state.nodes, d, 2 * d);
  GraphState next;
  next.step = state.step + 1;
  next.nodes = concat({visual, matmul(w6, concat({context, messages}, 0))}, 0);
  return next;
}

/// One full inference step on `state` with command q: fills the step's
/// adjacency, neighbors, weights and messages and returns the next state.
inline GraphState advance(GraphState& state, const Tensor& command, const GraphParams& p, const ModeFlags& flags) {
  state.command = command;
  state.adjacency = adjacency(state.nodes, command, p, flags.variant);
  state.neighbors = select_neighbors(state.adjacency.value(), flags.k);
  MessageResult mp = message_passing(state.nodes, state.adjacency, state.neighbors, command, p.w4, p.w5);
  state.weights = std::move(mp.weights);
  state.messages = mp.messages;
  return update_nodes(state, state.messages, p.w6);
}

/// Question inputs the iteration needs.
struct QuestionInputs {
  Tensor hidden;  // d x m
  Tensor words;   // d_w x m
  Tensor sentence;  // d x 1
  std::vector<bool> is_pad;
};

struct IterationResult {
  std::vector<GraphState> states;  // states[0] is the constructed graph, back() the final one
  std::vector<QuestionCommand> commands;

  const GraphState& final_state() const { return states.back(); }
};

/// Runs flags.steps() iterations from the constructed graph. `sentence_to_command`
/// is only used with no_q_att.
inline IterationResult iterate(const Tensor& visual, const Tensor& u, const QuestionInputs& question,
                               const GraphParams& p, std::span<const QuestionCommandWeights> command_weights,
                               const Tensor& sentence_to_command, const ModeFlags& flags,
                               const RunMode& mode = {}) {
  IterationResult out;
  out.states.push_back(init_graph(visual, u, flags.no_u));
  const std::size_t steps = flags.steps();
  for (std::size_t t = 1; t <= steps; ++t) {
    Tensor command;
    if (flags.no_q_att) {
      command = matmul(sentence_to_command, question.sentence);
    } else {
      QuestionCommand qc =
          question_command(question.hidden, question.words, t, command_weights, question.is_pad, mode);
      command = qc.command;
      out.commands.push_back(std::move(qc));
    }
    GraphState next = advance(out.states.back(), command, p, flags);
    out.states.push_back(std::move(next));
  }
  return out;
}

struct GraphAttention {
  Tensor embedding;  // 2d x 1
  Tensor alpha;      // 1 x n
};

/// z = tanh(Wg1 q 1^T + Wg2 N), alpha = softmax(Pg z), e = N alpha^T. With
/// `average` alpha is the uniform distribution.
inline GraphAttention graph_attention(const Tensor& nodes, const Tensor& q_s, const GraphParams& p,
                                      bool average = false, const RunMode& mode = {}) {
  const std::size_t n = nodes.cols();
  GraphAttention out;
  if (average) {
    out.alpha = Tensor::constant(Array(1, n, 1.0 / static_cast<double>(n)));
  } else {
    Tensor z = tanh(add(broadcast_cols(matmul(p.w_g1, q_s), n), matmul(p.w_g2, nodes)));
    z = mode.drop(z);
    out.alpha = softmax(matmul(p.p_g, z), 1);
  }
  out.embedding = matmul(nodes, transpose(out.alpha));
  return out;
}

/// e~ = tanh(We [e_g; u; q_s]), followed by dropout in training.
inline Tensor fuse(const Tensor& e_g, const Tensor& u, const Tensor& q_s, const Tensor& w_e, const RunMode& mode = {}) {
  const Tensor stacked = concat({e_g, u, q_s}, 0);
  if (w_e.cols() != stacked.rows())
    throw ShapeError("fuse: W_e " + shape_string(w_e.shape()) + " incompatible with input " +
                     shape_string(stacked.shape()));
  return mode.drop(tanh(matmul(w_e, stacked)));
}

}  // namespace cag
