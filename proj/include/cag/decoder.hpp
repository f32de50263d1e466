#pragma once

// Discriminative answer selection: dot-product candidate scores, softmax
// cross-entropy over the candidate list, retrieval metrics and Adam.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cag/gradcheck.hpp"
#include "cag/log.hpp"
#include "cag/tensor.hpp"

namespace cag {

/// logit_j = e . a_j for candidate columns a_j. Returns a C x 1 column.
inline Tensor score_candidates(const Tensor& fused, const Tensor& candidates) {
  if (fused.cols() != 1 || fused.rows() != candidates.rows())
    throw ShapeError("score_candidates: embedding " + shape_string(fused.shape()) + " vs candidates " +
                     shape_string(candidates.shape()));
  return matmul(transpose(candidates), fused);
}

/// Multi-class N-pair loss for one round: -log softmax(logits)[gt].
inline Tensor npair_loss(const Tensor& logits, std::size_t gt) { return softmax_cross_entropy(logits, gt); }

struct RankReport {
  double mean_rank = 0.0;
  double mrr = 0.0;
  double r1 = 0.0;
  double r5 = 0.0;
  double r10 = 0.0;
  std::size_t count = 0;
};

/// 1-based rank of the ground truth. Competitors scoring equal to it are
/// ranked ahead of it.
inline std::size_t rank_of(std::span<const double> logits, std::size_t gt) {
  if (gt >= logits.size()) throw std::out_of_range("rank_of: ground truth outside candidate list");
  std::size_t r = 1;
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (j != gt && logits[j] >= logits[gt]) ++r;
  return r;
}

inline RankReport report_from_ranks(std::span<const std::size_t> ranks) {
  RankReport rep;
  rep.count = ranks.size();
  if (ranks.empty()) return rep;
  for (std::size_t r : ranks) {
    rep.mean_rank += static_cast<double>(r);
    rep.mrr += 1.0 / static_cast<double>(r);
    rep.r1 += r <= 1 ? 1.0 : 0.0;
    rep.r5 += r <= 5 ? 1.0 : 0.0;
    rep.r10 += r <= 10 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(ranks.size());
  rep.mean_rank /= n;
  rep.mrr /= n;
  rep.r1 /= n;
  rep.r5 /= n;
  rep.r10 /= n;
  return rep;
}

inline RankReport rank_metrics(const std::vector<std::vector<double>>& logits, std::span<const std::size_t> gts) {
  if (logits.size() != gts.size())
    throw std::invalid_argument("rank_metrics: " + std::to_string(logits.size()) + " logit rows vs " +
                                std::to_string(gts.size()) + " targets");
  std::vector<std::size_t> ranks;
  ranks.reserve(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) ranks.push_back(rank_of(logits[i], gts[i]));
  return report_from_ranks(ranks);
}

struct AdamOptions {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 0.5;            // lr multiplier ...
  std::size_t decay_every = 10;  // ... applied after every this many epochs
};

struct OptimState {
  AdamOptions options;
  std::vector<Array> first;
  std::vector<Array> second;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t skipped = 0;

  OptimState() = default;
  OptimState(const AdamOptions& opts, const std::vector<NamedTensor>& params) : options(opts) {
    for (const auto& p : params) {
      first.emplace_back(p.tensor.shape());
      second.emplace_back(p.tensor.shape());
    }
  }

  /// Learning rate in effect for the current epoch (0-based).
  double lr() const { return lr_at(epoch); }

  double lr_at(std::size_t e) const {
    if (options.decay_every == 0) return options.lr;
    return options.lr * std::pow(options.decay, static_cast<double>(e / options.decay_every));
  }
};

/// One bias-corrected Adam update from the parameters' gradient slots.
/// Returns false, leaving everything untouched, when any gradient is not
/// finite.
inline bool adam_step(OptimState& state, const std::vector<NamedTensor>& params) {
  if (state.first.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer tracks " + std::to_string(state.first.size()) +
                                " parameters, got " + std::to_string(params.size()));
  for (const auto& p : params) {
    if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
      ++state.skipped;
      log_warning("adam_step: non-finite gradient in " + p.name + "; step skipped");
      return false;
    }
  }
  ++state.step;
  const AdamOptions& o = state.options;
  const double lr = state.lr();
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    if (!t.has_grad()) continue;
    const Array& g = t.grad();
    Array& w = t.mutable_value();
    Array& m = state.first[k];
    Array& v = state.second[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + o.eps);
    }
  }
  return true;
}

}  // namespace cag
