#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cag/tensor.hpp"

namespace cag {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ParamGradError {
  std::string name;
  std::size_t entries = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double tolerance = 0.0;
  bool passed = true;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
};

// Floor on the relative-error denominator so entries whose true derivative is
// (numerically) zero are judged on absolute error.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
}

/// Compares reverse-mode gradients of `fn` against central differences for
/// every entry of every listed parameter. `fn` must be deterministic: it is
/// evaluated twice up front and rejected if the two values differ.
inline GradCheckReport finite_diff_check(const std::function<Tensor()>& fn,
                                         const std::vector<NamedTensor>& params, double step = 1e-5,
                                         double tol = 1e-4) {
  GradCheckReport report;
  report.tolerance = tol;
  if (params.empty()) return report;

  const double first = fn().item();
  const double second = fn().item();
  if (first != second)
    throw std::runtime_error("finite_diff_check: function is not deterministic (" + std::to_string(first) +
                             " vs " + std::to_string(second) + ")");

  for (const auto& p : params) {
    auto t = p.tensor;
    t.zero_grad();
  }
  backward(fn());
  std::vector<Array> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.tensor.grad());

  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].tensor;
    ParamGradError err;
    err.name = params[pi].name;
    err.entries = t.size();
    Array& v = t.mutable_value();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + step;
      const double up = fn().item();
      v[i] = saved - step;
      const double down = fn().item();
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double rel = relative_error(analytic[pi][i], numeric);
      const double abs_err = std::abs(analytic[pi][i] - numeric);
      if (rel > err.max_rel_error) {
        err.max_rel_error = rel;
        err.worst_index = i;
      }
      err.max_abs_error = std::max(err.max_abs_error, abs_err);
    }
    err.passed = err.max_rel_error < tol;
    report.passed = report.passed && err.passed;
    report.params.push_back(std::move(err));
  }
  return report;
}

}  // namespace cag
