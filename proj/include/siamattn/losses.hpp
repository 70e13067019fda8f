#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "siamattn/ops.hpp"

namespace siamattn {

// A selected anchor and its binary target (1 = target, 0 = background).
struct AnchorTarget {
  std::size_t index = 0;
  int label = 0;
};

// Mean two-way negative log-likelihood over `targets`. cls is 2k x R x R with
// channel (class * k + anchor).
template <typename T>
Var<T> anchor_nll(const Var<T>& cls, int k, const std::vector<AnchorTarget>& targets) {
  SIAMATTN_CHECK(cls.value().rank() == 3 && cls.dim(0) == 2 * k, ErrorCode::kShapeMismatch,
                 "anchor_nll expects a 2k x R x R map");
  const std::size_t plane = static_cast<std::size_t>(cls.dim(1)) * cls.dim(2);
  // Anchor a at cell p reads background channel a and target channel k + a.
  const std::size_t fg_off = static_cast<std::size_t>(k) * plane;
  const auto& v = cls.value();
  double total = 0;
  std::vector<double> p_fg(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const std::size_t s = targets[i].index;
    const double bg = v[s], fg = v[fg_off + s];
    const double m = std::max(bg, fg);
    const double lse = m + std::log(std::exp(bg - m) + std::exp(fg - m));
    total += lse - (targets[i].label == 1 ? fg : bg);
    p_fg[i] = std::exp(fg - lse);
  }
  const double n = std::max<std::size_t>(targets.size(), 1);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / n));
  return make_result<T>(std::move(out), {cls}, [targets, p_fg, fg_off, n](Node<T>& node) {
    auto* g = node.input_grad(0);
    if (!g) return;
    const double go = node.grad[0] / n;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const std::size_t s = targets[i].index;
      const double y = targets[i].label == 1 ? 1.0 : 0.0;
      (*g)[fg_off + s] += static_cast<T>(go * (p_fg[i] - y));
      (*g)[s] += static_cast<T>(go * ((1 - p_fg[i]) - (1 - y)));
    }
  });
}

inline double smooth_l1_value(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

inline double smooth_l1_grad(double d, double beta) {
  const double a = std::abs(d);
  if (a < beta) return d / beta;
  return d > 0 ? 1.0 : -1.0;
}

// Smooth-L1 summed over the 4 coordinates and averaged over entries.
// `indices` pick anchor slots from a 4k x R x R map (channel coord * k + a).
template <typename T>
Var<T> anchor_smooth_l1(const Var<T>& reg, int k, const std::vector<std::size_t>& indices,
                        const std::vector<std::array<double, 4>>& targets, double beta) {
  SIAMATTN_CHECK(indices.size() == targets.size(), ErrorCode::kInvalidArgument,
                 "anchor_smooth_l1: index/target count mismatch");
  SIAMATTN_CHECK(reg.value().rank() == 3 && reg.dim(0) == 4 * k, ErrorCode::kShapeMismatch,
                 "anchor_smooth_l1 expects a 4k x R x R map");
  const std::size_t plane = static_cast<std::size_t>(reg.dim(1)) * reg.dim(2);
  std::vector<std::size_t> slots;
  for (std::size_t idx : indices) {
    const std::size_t a = idx / plane, p = idx % plane;
    for (int c = 0; c < 4; ++c) slots.push_back((static_cast<std::size_t>(c) * k + a) * plane + p);
  }
  std::vector<double> diffs(slots.size());
  double total = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    diffs[i] = static_cast<double>(reg.value()[slots[i]]) - targets[i / 4][i % 4];
    total += smooth_l1_value(diffs[i], beta);
  }
  const double n = std::max<std::size_t>(indices.size(), 1);
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total / n)), {reg},
                        [slots, diffs, beta, n](Node<T>& node) {
                          auto* g = node.input_grad(0);
                          if (!g) return;
                          const double go = node.grad[0] / n;
                          for (std::size_t i = 0; i < slots.size(); ++i)
                            (*g)[slots[i]] += static_cast<T>(go * smooth_l1_grad(diffs[i], beta));
                        });
}

// Smooth-L1 between a dense prediction and a target of the same size, summed.
template <typename T>
Var<T> smooth_l1_sum(const Var<T>& pred, const std::vector<double>& target, double beta) {
  SIAMATTN_CHECK(pred.value().size() == target.size(), ErrorCode::kShapeMismatch,
                 "smooth_l1_sum: size mismatch");
  std::vector<double> diffs(target.size());
  double total = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    diffs[i] = static_cast<double>(pred.value()[i]) - target[i];
    total += smooth_l1_value(diffs[i], beta);
  }
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total)), {pred}, [diffs, beta](Node<T>& node) {
    auto* g = node.input_grad(0);
    if (!g) return;
    for (std::size_t i = 0; i < diffs.size(); ++i)
      (*g)[i] += static_cast<T>(node.grad[0] * smooth_l1_grad(diffs[i], beta));
  });
}

// Mean binary cross-entropy of sigmoid(logits) against targets in [0, 1].
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const std::vector<double>& target) {
  SIAMATTN_CHECK(logits.value().size() == target.size() && !target.empty(), ErrorCode::kShapeMismatch,
                 "bce_with_logits: size mismatch");
  const auto& v = logits.value();
  double total = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double x = v[i];
    total += std::max(x, 0.0) - x * target[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double n = static_cast<double>(target.size());
  return make_result<T>(Tensor<T>::scalar(static_cast<T>(total / n)), {logits}, [target, n](Node<T>& node) {
    auto* g = node.input_grad(0);
    if (!g) return;
    const double go = node.grad[0] / n;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double x = node.inputs[0]->value[i];
      const double p = 1.0 / (1.0 + std::exp(-x));
      (*g)[i] += static_cast<T>(go * (p - target[i]));
    }
  });
}

}  // namespace siamattn
