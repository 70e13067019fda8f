#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <queue>
#include <vector>

#include "siamattn/data.hpp"
#include "siamattn/model.hpp"

namespace siamattn {

enum class TrackMode { kAxisAligned, kRotatedFromMask };

struct TrackerConfig {
  double window_influence = 0.4;
  double penalty_k = 0.05;
  double size_lr = 0.3;
  TrackMode mode = TrackMode::kAxisAligned;
  double context_amount = 0.5;
  double min_size = 4;  // frame pixels

  bool operator==(const TrackerConfig&) const = default;
};

template <typename T>
struct TrackState {
  TemplateFeatures<T> template_features;
  double cx = 0, cy = 0;
  double w = 0, h = 0;
  int frame_width = 0, frame_height = 0;
  TrackerConfig cfg;
};

struct TrackOutput {
  Box box;                           // axis-aligned, frame pixels
  std::optional<RotatedBox> rotated; // set in rotated mode
  double score = 0;
  Box proposal;                      // RPN box before refinement, frame pixels
  Mask mask;                         // binary mask over the refined box extent (rotated mode)
  Box mask_box;                      // frame region covered by `mask`
};

inline std::vector<double> hanning(int n) {
  std::vector<double> w(static_cast<std::size_t>(n), 1.0);
  if (n == 1) return w;
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / (n - 1));
  return w;
}

// Cosine window over the response grid, repeated for each anchor shape.
inline std::vector<double> cosine_window(int size, int k) {
  const auto h = hanning(size);
  std::vector<double> win;
  win.reserve(static_cast<std::size_t>(k) * size * size);
  for (int a = 0; a < k; ++a)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) win.push_back(h[static_cast<std::size_t>(y)] * h[static_cast<std::size_t>(x)]);
  return win;
}

inline double change_ratio(double r) { return std::max(r, 1.0 / r); }

inline double padded_size(double w, double h) {
  const double p = (w + h) * 0.5;
  return std::sqrt((w + p) * (h + p));
}

// SiamRPN penalties. `boxes` are decoded proposals and (target_w, target_h)
// the current target size, both in crop pixels:
//   penalty = exp(-k (change(r / r') * change(s / s') - 1))
//   score'  = (1 - wi) * score * penalty + wi * window
// with s the padded size sqrt((w + p)(h + p)), p = (w + h) / 2, r = w / h and
// change(x) = max(x, 1 / x).
inline std::vector<double> apply_penalties(const std::vector<double>& scores, const std::vector<Box>& boxes,
                                           double target_w, double target_h, const TrackerConfig& cfg,
                                           const std::vector<double>& window, std::vector<double>* penalty_out = nullptr) {
  SIAMATTN_CHECK(scores.size() == boxes.size() && scores.size() == window.size(), ErrorCode::kShapeMismatch,
                 "apply_penalties: size mismatch");
  std::vector<double> out(scores.size());
  if (penalty_out) penalty_out->assign(scores.size(), 1.0);
  const double s_ref = padded_size(target_w, target_h), r_ref = target_w / target_h;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const Box& b = boxes[i];
    double penalty = 1.0;
    if (cfg.penalty_k != 0 && b.w > 0 && b.h > 0) {
      const double s_c = change_ratio(padded_size(b.w, b.h) / s_ref);
      const double r_c = change_ratio(r_ref / (b.w / b.h));
      penalty = std::exp(-(r_c * s_c - 1.0) * cfg.penalty_k);
    }
    if (penalty_out) (*penalty_out)[i] = penalty;
    const double pscore = scores[i] * penalty;
    out[i] = cfg.window_influence == 0 ? pscore : (1 - cfg.window_influence) * pscore + cfg.window_influence * window[i];
  }
  return out;
}

// Minimum-area rectangle of the largest 4-connected foreground component of
// `mask` (probabilities over `box_frame`, any resolution). The mask is first
// resized to the box's pixel extent and thresholded. Returns nullopt for an
// empty mask.
inline std::optional<RotatedBox> rotated_box_from_mask(const Mask& mask, const Box& box_frame, double threshold = 0.5,
                                                       Mask* binary_out = nullptr) {
  const int w = std::max(1, static_cast<int>(std::lround(box_frame.w)));
  const int h = std::max(1, static_cast<int>(std::lround(box_frame.h)));
  Mask bin(1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double sy = (y + 0.5) * mask.height / h - 0.5, sx = (x + 0.5) * mask.width / w - 0.5;
      bin.at(0, y, x) = sample_clamped(mask, 0, sy, sx) > threshold ? 1.f : 0.f;
    }
  // Largest component by flood fill.
  std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
  int best = -1;
  std::size_t best_size = 0;
  int next = 0;
  for (int s = 0; s < w * h; ++s) {
    if (bin.data[static_cast<std::size_t>(s)] < 0.5f || label[static_cast<std::size_t>(s)] >= 0) continue;
    std::size_t count = 0;
    std::queue<int> q;
    q.push(s);
    label[static_cast<std::size_t>(s)] = next;
    while (!q.empty()) {
      const int p = q.front();
      q.pop();
      ++count;
      const int py = p / w, px = p % w;
      const int nb[4][2] = {{py - 1, px}, {py + 1, px}, {py, px - 1}, {py, px + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int idx = n[0] * w + n[1];
        if (bin.data[static_cast<std::size_t>(idx)] < 0.5f || label[static_cast<std::size_t>(idx)] >= 0) continue;
        label[static_cast<std::size_t>(idx)] = next;
        q.push(idx);
      }
    }
    if (count > best_size) {
      best_size = count;
      best = next;
    }
    ++next;
  }
  if (best < 0) return std::nullopt;
  std::vector<Point2> pts;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (label[static_cast<std::size_t>(y) * w + x] != best) {
        bin.at(0, y, x) = 0.f;
        continue;
      }
      pts.push_back({x + 0.5, y + 0.5});
    }
  if (binary_out) *binary_out = bin;
  RotatedBox r = min_area_rect(pts);
  // Pixel centres span one pixel less than the pixels themselves.
  r.w += 1.0;
  r.h += 1.0;
  const double sx = box_frame.w / w, sy = box_frame.h / h;
  r.cx = box_frame.x1() + r.cx * sx;
  r.cy = box_frame.y1() + r.cy * sy;
  r.w *= std::sqrt(sx * sy);
  r.h *= std::sqrt(sx * sy);
  return r;
}

inline RotatedBox rotated_from_axis(const Box& b) { return RotatedBox{b.cx, b.cy, b.w, b.h, 0.0}; }

// Single-sequence tracker. Template backbone features are computed once at
// init; the attention module still sees them against every new search crop.
template <typename T>
class Tracker {
 public:
  Tracker(const SiamAttnModel<T>& model, TrackerConfig cfg) : model_(model), cfg_(cfg) {
    const auto& mc = model_.config();
    window_ = cosine_window(mc.response_size(), mc.anchors_per_cell());
    crop_.exemplar_size = mc.exemplar_size;
    crop_.search_size = mc.search_size;
    crop_.context_amount = cfg_.context_amount;
  }

  void init(const Image& frame, const Box& box) {
    SIAMATTN_CHECK(box.valid(), ErrorCode::kInvalidArgument, "tracker init: degenerate box");
    NoGradGuard ng;
    state_ = TrackState<T>{};
    state_.cfg = cfg_;
    state_.cx = box.cx;
    state_.cy = box.cy;
    state_.w = box.w;
    state_.h = box.h;
    state_.frame_width = frame.width;
    state_.frame_height = frame.height;
    const Image z = crop_window(frame, exemplar_window(box, crop_));
    state_.template_features = model_.encode_template(Var<T>(image_to_tensor<T>(z)));
    ++template_encodings_;
    initialized_ = true;
  }

  TrackOutput track(const Image& frame) {
    SIAMATTN_CHECK(initialized_, ErrorCode::kInvalidArgument, "tracker: track() before init()");
    NoGradGuard ng;
    const auto& mc = model_.config();
    const CropWindow win = search_window(state_.cx, state_.cy, Box{state_.cx, state_.cy, state_.w, state_.h}, crop_);
    const Image x = crop_window(frame, win);
    const auto out = model_.forward(state_.template_features, Var<T>(image_to_tensor<T>(x)));
    const auto& anchors = model_.anchors();
    const auto scores = foreground_scores(out.fused.cls.value(), anchors.k);
    const auto boxes = decode_proposals(out.fused.reg.value(), anchors);
    const double tw = state_.w / win.scale(), th = state_.h / win.scale();
    std::vector<double> penalty;
    const auto penalized = apply_penalties(scores, boxes, tw, th, cfg_, window_, &penalty);
    const std::size_t best = argmax_first(penalized);

    TrackOutput res;
    res.score = scores[best];
    Box pred = boxes[best];
    res.proposal = win.to_frame(pred);
    if (mc.refinement.enabled) {
      ++refine_calls_;
      const bool rotated = cfg_.mode == TrackMode::kRotatedFromMask;
      const auto rr = model_.refiner().refine(out.pyramid, pred, mc.search_size, false);
      Box refined = decode(to_box_delta(rr.box_delta), rr.region);
      if (refined.valid() && std::isfinite(refined.w) && std::isfinite(refined.h)) pred = refined;
      if (rotated) {
        const Box region = clip_box(pred, mc.search_size, mc.search_size);
        if (region.valid()) {
          const auto logits = model_.refiner().refine_mask(out.pyramid, region, mc.search_size);
          const auto& lv = logits.value();
          Mask prob(1, lv.dim(1), lv.dim(2));
          for (std::size_t i = 0; i < lv.size(); ++i) prob.data[i] = static_cast<float>(1.0 / (1.0 + std::exp(-lv[i])));
          res.mask_box = win.to_frame(region);
          res.rotated = rotated_box_from_mask(prob, res.mask_box, mc.refinement.mask_threshold, &res.mask);
        }
      }
    }
    const Box in_frame = win.to_frame(pred);
    const double lr = cfg_.size_lr;
    state_.w = std::clamp((1 - lr) * state_.w + lr * in_frame.w, cfg_.min_size, static_cast<double>(state_.frame_width));
    state_.h = std::clamp((1 - lr) * state_.h + lr * in_frame.h, cfg_.min_size, static_cast<double>(state_.frame_height));
    state_.cx = std::clamp(in_frame.cx, 0.0, static_cast<double>(state_.frame_width));
    state_.cy = std::clamp(in_frame.cy, 0.0, static_cast<double>(state_.frame_height));
    res.box = Box{state_.cx, state_.cy, state_.w, state_.h};
    if (cfg_.mode == TrackMode::kRotatedFromMask && !res.rotated) res.rotated = rotated_from_axis(res.box);
    return res;
  }

  const TrackState<T>& state() const { return state_; }
  long refine_calls() const { return refine_calls_; }
  long template_encodings() const { return template_encodings_; }

 private:
  const SiamAttnModel<T>& model_;
  TrackerConfig cfg_;
  CropConfig crop_;
  std::vector<double> window_;
  TrackState<T> state_;
  bool initialized_ = false;
  long refine_calls_ = 0;
  long template_encodings_ = 0;
};

}  // namespace siamattn
