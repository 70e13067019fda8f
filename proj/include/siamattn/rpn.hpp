#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "siamattn/geometry.hpp"
#include "siamattn/params.hpp"

namespace siamattn {

struct AnchorConfig {
  std::vector<double> ratios{0.33, 0.5, 1.0, 2.0, 3.0};  // height / width
  double base_scale = 8;  // anchor side (at ratio 1) = base_scale * stride
  int stride = 8;

  bool operator==(const AnchorConfig&) const = default;
};

// Anchors over an R x R response map. Flat index = a * R * R + y * R + x.
// Cell (i, j) is centred at search_size / 2 + (j - (R - 1) / 2) * stride.
struct AnchorSet {
  std::vector<Box> boxes;
  int k = 0;
  int size = 0;
  int stride = 8;
  double origin = 0;  // pixel coordinate of cell 0's centre (both axes)

  std::size_t count() const { return boxes.size(); }
  int flat_index(int a, int y, int x) const { return (a * size + y) * size + x; }
};

inline AnchorSet make_anchors(const AnchorConfig& cfg, int response_size, int search_size) {
  SIAMATTN_CHECK(!cfg.ratios.empty() && cfg.base_scale > 0 && response_size > 0, ErrorCode::kInvalidArgument,
                 "invalid anchor configuration");
  AnchorSet set;
  set.k = static_cast<int>(cfg.ratios.size());
  set.size = response_size;
  set.stride = cfg.stride;
  set.origin = search_size / 2.0 - (response_size - 1) / 2.0 * cfg.stride;
  const double side = cfg.base_scale * cfg.stride;
  set.boxes.reserve(static_cast<std::size_t>(set.k) * response_size * response_size);
  for (double r : cfg.ratios) {
    SIAMATTN_CHECK(r > 0, ErrorCode::kInvalidArgument, "anchor ratios must be positive");
    const double w = side / std::sqrt(r), h = side * std::sqrt(r);
    for (int y = 0; y < response_size; ++y)
      for (int x = 0; x < response_size; ++x)
        set.boxes.push_back(Box{set.origin + x * cfg.stride, set.origin + y * cfg.stride, w, h});
  }
  return set;
}

enum class AnchorLabel : int { kIgnore = -1, kNegative = 0, kPositive = 1 };

struct LabelThresholds {
  double positive = 0.6;  // IoU strictly above
  double negative = 0.3;  // IoU strictly below
};

inline std::vector<AnchorLabel> label_anchors(const AnchorSet& anchors, const Box& gt,
                                              const LabelThresholds& th = {}) {
  SIAMATTN_CHECK(gt.valid(), ErrorCode::kInvalidArgument, "label_anchors: degenerate ground-truth box");
  std::vector<AnchorLabel> labels(anchors.count(), AnchorLabel::kIgnore);
  for (std::size_t i = 0; i < anchors.count(); ++i) {
    const double v = iou(anchors.boxes[i], gt);
    if (v > th.positive) labels[i] = AnchorLabel::kPositive;
    else if (v < th.negative) labels[i] = AnchorLabel::kNegative;
  }
  return labels;
}

// cls: 2k x R x R with channel (class * k + anchor), class 0 background and 1
// target. reg: 4k x R x R with channel (coord * k + anchor), coords tx ty tw th.
template <typename T>
struct RpnOutput {
  Var<T> cls;
  Var<T> reg;
};

// Correlation divided by the kernel area, which keeps head activations at the
// scale of the features for any template size.
template <typename T>
Var<T> normalized_xcorr(const Var<T>& search, const Var<T>& kernel) {
  return scale(depthwise_xcorr(search, kernel), static_cast<T>(1.0 / (kernel.dim(1) * kernel.dim(2))));
}

template <typename T>
class RpnBlock {
 public:
  RpnBlock() = default;
  RpnBlock(ParameterStore<T>& store, const std::string& name, int channels, int k, Rng& rng) {
    const auto g = ParamGroup::kHead;
    const auto same = ConvGeometry::same(3);
    for (int head = 0; head < 2; ++head) {
      const std::string hn = name + (head == 0 ? ".cls" : ".reg");
      const int out = head == 0 ? 2 * k : 4 * k;
      auto& h = heads_[static_cast<std::size_t>(head)];
      h.kernel_adjust = Conv2d<T>::create(store, hn + ".kernel_adjust", g, channels, channels, 3, same, rng);
      h.search_adjust = Conv2d<T>::create(store, hn + ".search_adjust", g, channels, channels, 3, same, rng);
      h.hidden = Conv2d<T>::create(store, hn + ".hidden", g, channels, channels, 1, {}, rng);
      h.out = Conv2d<T>::create(store, hn + ".out", g, channels, out, 1, {}, rng, true, Init::kSmall);
    }
  }

  // `z` is the cropped template feature, `x` the search feature.
  RpnOutput<T> operator()(const Var<T>& z, const Var<T>& x) const {
    SIAMATTN_CHECK(z.dim(0) == x.dim(0), ErrorCode::kShapeMismatch,
                   "rpn_block channel mismatch " + shape_str(z.shape()) + " vs " + shape_str(x.shape()));
    RpnOutput<T> out;
    out.cls = run(heads_[0], z, x);
    out.reg = run(heads_[1], z, x);
    return out;
  }

  const Conv2d<T>& output_layer(int head) const { return heads_[static_cast<std::size_t>(head)].out; }

 private:
  struct Head {
    Conv2d<T> kernel_adjust, search_adjust, hidden, out;
  };

  static Var<T> run(const Head& h, const Var<T>& z, const Var<T>& x) {
    const Var<T> corr = normalized_xcorr(relu(h.search_adjust(x)), relu(h.kernel_adjust(z)));
    return h.out(relu(h.hidden(corr)));
  }

  std::array<Head, 2> heads_;
};

// Weighted sum of the three stage outputs with softmax-normalised logits.
template <typename T>
RpnOutput<T> fuse_stages(std::span<const RpnOutput<T>> outputs, const Var<T>& cls_logits,
                         const Var<T>& reg_logits) {
  SIAMATTN_CHECK(outputs.size() == 3, ErrorCode::kInvalidArgument,
                 "fuse_stages expects 3 stage outputs, got " + std::to_string(outputs.size()));
  SIAMATTN_CHECK(cls_logits.value().size() == 3 && reg_logits.value().size() == 3, ErrorCode::kShapeMismatch,
                 "fusion weights must have 3 entries");
  const Var<T> wc = softmax_all(cls_logits);
  const Var<T> wr = softmax_all(reg_logits);
  std::vector<Var<T>> cls, reg;
  for (int i = 0; i < 3; ++i) {
    const auto& o = outputs[static_cast<std::size_t>(i)];
    SIAMATTN_CHECK(o.cls.shape() == outputs[0].cls.shape() && o.reg.shape() == outputs[0].reg.shape(),
                   ErrorCode::kShapeMismatch, "fuse_stages: stage outputs differ in shape");
    cls.push_back(mul_scalar(o.cls, select(wc, i)));
    reg.push_back(mul_scalar(o.reg, select(wr, i)));
  }
  return RpnOutput<T>{add_n(cls), add_n(reg)};
}

// Target probability per anchor (flat anchor order).
template <typename T>
std::vector<double> foreground_scores(const Tensor<T>& cls, int k) {
  const int r = cls.dim(1);
  const std::size_t plane = static_cast<std::size_t>(r) * r;
  std::vector<double> scores(static_cast<std::size_t>(k) * plane);
  for (int a = 0; a < k; ++a) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double bg = cls[static_cast<std::size_t>(a) * plane + p];
      const double fg = cls[static_cast<std::size_t>(k + a) * plane + p];
      scores[static_cast<std::size_t>(a) * plane + p] = 1.0 / (1.0 + std::exp(bg - fg));
    }
  }
  return scores;
}

template <typename T>
BoxDelta delta_at(const Tensor<T>& reg, int k, std::size_t flat) {
  const int r = reg.dim(1);
  const std::size_t plane = static_cast<std::size_t>(r) * r;
  const std::size_t a = flat / plane, p = flat % plane;
  auto v = [&](int coord) { return static_cast<double>(reg[(coord * k + a) * plane + p]); };
  return BoxDelta{v(0), v(1), v(2), v(3)};
}

template <typename T>
std::vector<Box> decode_proposals(const Tensor<T>& reg, const AnchorSet& anchors) {
  std::vector<Box> out(anchors.count());
  for (std::size_t i = 0; i < anchors.count(); ++i) {
    BoxDelta d = delta_at(reg, anchors.k, i);
    // Log-size deltas clamped to [-4, 4].
    d.tw = std::clamp(d.tw, -4.0, 4.0);
    d.th = std::clamp(d.th, -4.0, 4.0);
    out[i] = decode(d, anchors.boxes[i]);
  }
  return out;
}

struct Proposal {
  Box box;
  double score = 0;  // raw target probability at the chosen anchor
  std::size_t index = 0;
};

// Argmax over (optionally penalised) scores; ties go to the lowest flat index.
inline std::size_t argmax_first(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

template <typename T>
Proposal select_best_proposal(const RpnOutput<T>& fused, const AnchorSet& anchors,
                              std::span<const double> penalized = {}) {
  const auto scores = foreground_scores(fused.cls.value(), anchors.k);
  const auto boxes = decode_proposals(fused.reg.value(), anchors);
  const std::size_t best = argmax_first(penalized.empty() ? std::span<const double>(scores) : penalized);
  return Proposal{boxes[best], scores[best], best};
}

}  // namespace siamattn
