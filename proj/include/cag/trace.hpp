#pragma once

// Per-question attention trace: word attention, adjacency, neighbor sets,
// edge weights and messages for each inference step, plus history and graph
// attention and the final candidate scores. Serialized as plot-ready JSON.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/model.hpp"
#include "json.hpp"

namespace cag {

struct StepTrace {
  std::size_t step = 0;
  std::vector<double> alpha_q;  // empty under no_q_att
  Array adjacency;
  std::vector<std::vector<std::size_t>> neighbors;
  Array weights;
  Array messages;
  std::vector<std::size_t> top_objects;  // two objects receiving the most edge mass, strongest first
};

struct AttentionTrace {
  std::vector<double> alpha_h;
  std::vector<StepTrace> steps;
  std::vector<double> alpha_g;
  std::vector<double> logits;
  std::size_t predicted = 0;
  std::size_t gt = 0;
  std::size_t gt_rank = 0;
};

/// Objects ordered by the edge mass they send (sum over receivers i of
/// B_{j->i}); ties go to the lower index.
inline std::vector<std::size_t> most_attended(const GraphState& s, std::size_t count) {
  const std::size_t n = s.size();
  std::vector<double> mass(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < s.neighbors[i].size(); ++k) mass[s.neighbors[i][k]] += s.weights(i, k);
  std::vector<std::size_t> idx(n);
  for (std::size_t j = 0; j < n; ++j) idx[j] = j;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return mass[a] > mass[b]; });
  idx.resize(std::min(count, n));
  return idx;
}

inline AttentionTrace make_trace(const ForwardResult& r, std::size_t gt) {
  AttentionTrace t;
  t.alpha_h = r.history.alpha.value().values();
  const auto& states = r.graph.states;
  for (std::size_t s = 0; s + 1 < states.size(); ++s) {
    const GraphState& g = states[s];
    StepTrace st;
    st.step = g.step;
    if (s < r.graph.commands.size()) st.alpha_q = r.graph.commands[s].alpha.value().values();
    st.adjacency = g.adjacency.value();
    st.neighbors = g.neighbors;
    st.weights = g.weights;
    st.messages = g.messages.value();
    st.top_objects = most_attended(g, 2);
    t.steps.push_back(std::move(st));
  }
  t.alpha_g = r.pooled.alpha.value().values();
  t.logits = r.logit_values();
  t.gt = gt;
  t.predicted = 0;
  for (std::size_t j = 1; j < t.logits.size(); ++j)
    if (t.logits[j] > t.logits[t.predicted]) t.predicted = j;
  t.gt_rank = rank_of(t.logits, gt);
  return t;
}

inline constexpr double kSimplexTolerance = 1e-9;

/// Checks simplex sums and dimensions against the expected object count,
/// neighbor count and step count.
inline void validate_trace(const AttentionTrace& t, std::size_t n, std::size_t k, std::size_t steps) {
  auto simplex = [](const std::vector<double>& v, const std::string& what) {
    double s = 0.0;
    for (double x : v) {
      if (x < 0.0 || !std::isfinite(x)) throw std::logic_error("trace: " + what + " has an invalid entry");
      s += x;
    }
    if (std::abs(s - 1.0) > kSimplexTolerance)
      throw std::logic_error("trace: " + what + " sums to " + std::to_string(s));
  };
  simplex(t.alpha_h, "alpha_h");
  simplex(t.alpha_g, "alpha_g");
  if (t.alpha_g.size() != n) throw std::logic_error("trace: alpha_g has " + std::to_string(t.alpha_g.size()) + " entries, expected " + std::to_string(n));
  if (t.steps.size() != steps)
    throw std::logic_error("trace: " + std::to_string(t.steps.size()) + " step records, expected " + std::to_string(steps));
  const std::size_t kk = std::min(k, n);
  for (const auto& s : t.steps) {
    const std::string tag = "step " + std::to_string(s.step);
    if (!s.alpha_q.empty()) simplex(s.alpha_q, tag + " alpha_q");
    if (s.adjacency.rows() != n || s.adjacency.cols() != n) throw std::logic_error("trace: " + tag + " adjacency shape");
    if (s.neighbors.size() != n) throw std::logic_error("trace: " + tag + " neighbor list count");
    for (std::size_t i = 0; i < n; ++i) {
      if (s.neighbors[i].size() != kk) throw std::logic_error("trace: " + tag + " neighbor list size");
      simplex(std::vector<double>(s.weights.data().begin() + static_cast<std::ptrdiff_t>(i * kk),
                                  s.weights.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * kk)),
              tag + " B row " + std::to_string(i));
    }
  }
}

namespace detail {
inline nlohmann::json matrix_json(const Array& a) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::vector<double> row(a.data().begin() + static_cast<std::ptrdiff_t>(i * a.cols()),
                            a.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * a.cols()));
    rows.push_back(row);
  }
  return rows;
}
}  // namespace detail

inline nlohmann::json trace_json(const AttentionTrace& t) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : t.steps)
    steps.push_back({{"t", s.step},
                     {"alpha_q", s.alpha_q},
                     {"A", detail::matrix_json(s.adjacency)},
                     {"S", s.neighbors},
                     {"B", detail::matrix_json(s.weights)},
                     {"M", detail::matrix_json(s.messages)},
                     {"top2", s.top_objects}});
  return nlohmann::json{{"alpha_h", t.alpha_h}, {"steps", steps},          {"alpha_g", t.alpha_g},
                        {"logits", t.logits},   {"predicted", t.predicted}, {"gt", t.gt},
                        {"rank", t.gt_rank}};
}

}  // namespace cag
