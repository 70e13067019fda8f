#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "siamattn/data.hpp"
#include "siamattn/geometry.hpp"

namespace siamattn {

inline constexpr int kSuccessThresholds = 101;
inline constexpr double kPrecisionThreshold = 20.0;

struct MetricReport {
  double precision_at_20 = 0;
  std::vector<double> success_curve = std::vector<double>(kSuccessThresholds, 0.0);
  std::vector<double> precision_curve = std::vector<double>(51, 0.0);  // centre error thresholds 0..50 px
  double auc = 0;
  double accuracy = 0;  // mean IoU
  int failures = 0;
  std::size_t frames = 0;
};

inline double center_error(const Box& a, const Box& b) { return std::hypot(a.cx - b.cx, a.cy - b.cy); }

// Success counts IoU strictly above each threshold t = i / 100, so a perfect
// tracker scores 0 at t = 1 and its AUC is 100 / 101. Precision counts centre
// errors at or below the threshold.
inline MetricReport precision_success(const std::vector<Box>& results, const std::vector<Box>& gt) {
  SIAMATTN_CHECK(results.size() == gt.size(), ErrorCode::kInvalidArgument,
                 "precision_success: " + std::to_string(results.size()) + " results vs " + std::to_string(gt.size()) +
                     " ground-truth frames");
  MetricReport r;
  r.frames = gt.size();
  if (gt.empty()) return r;
  const double n = static_cast<double>(gt.size());
  double iou_sum = 0;
  for (std::size_t f = 0; f < gt.size(); ++f) {
    const double o = iou(results[f], gt[f]);
    const double e = center_error(results[f], gt[f]);
    iou_sum += o;
    for (int i = 0; i < kSuccessThresholds; ++i)
      if (o > i / 100.0) r.success_curve[static_cast<std::size_t>(i)] += 1.0 / n;
    for (std::size_t i = 0; i < r.precision_curve.size(); ++i)
      if (e <= static_cast<double>(i)) r.precision_curve[i] += 1.0 / n;
    if (e <= kPrecisionThreshold) r.precision_at_20 += 1.0 / n;
  }
  double s = 0;
  for (double v : r.success_curve) s += v;
  r.auc = s / kSuccessThresholds;
  r.accuracy = iou_sum / n;
  return r;
}

// Pools frames from several sequences into one report.
inline MetricReport aggregate(const std::vector<std::vector<Box>>& results, const std::vector<std::vector<Box>>& gt) {
  SIAMATTN_CHECK(results.size() == gt.size(), ErrorCode::kInvalidArgument, "aggregate: sequence count mismatch");
  std::vector<Box> r, g;
  for (std::size_t i = 0; i < results.size(); ++i) {
    SIAMATTN_CHECK(results[i].size() == gt[i].size(), ErrorCode::kInvalidArgument, "aggregate: length mismatch");
    r.insert(r.end(), results[i].begin(), results[i].end());
    g.insert(g.end(), gt[i].begin(), gt[i].end());
  }
  return precision_success(r, g);
}

struct SequenceTrackerFn {
  std::function<void(const Image&, const Box&)> init;
  std::function<Box(const Image&)> update;
};

struct ResetProtocol {
  int reinit_delay = 5;  // frames skipped after a failure before re-initialising
  int burn_in = 5;       // frames after each (re)initialisation excluded from accuracy
};

enum class ProtocolEvent { kInit, kFailure, kReinit };

struct ProtocolLogEntry {
  int frame = 0;
  ProtocolEvent event = ProtocolEvent::kInit;
};

struct ResetResult {
  double accuracy = 0;
  int failures = 0;
  std::vector<ProtocolLogEntry> events;
  std::vector<double> overlaps;  // per frame; NaN when not tracked
};

inline const char* event_name(ProtocolEvent e) {
  switch (e) {
    case ProtocolEvent::kInit: return "init";
    case ProtocolEvent::kFailure: return "failure";
    case ProtocolEvent::kReinit: return "reinit";
  }
  return "?";
}

// Simplified VOT-style run: a frame with zero overlap is a failure, and the
// tracker is re-initialised on the ground truth `reinit_delay` frames later.
inline ResetResult reset_protocol_run(SequenceTrackerFn& tracker, const SequenceRecord& seq,
                                      const ResetProtocol& protocol = {}) {
  ResetResult res;
  res.overlaps.assign(seq.size(), std::nan(""));
  if (seq.size() == 0) return res;
  int f = 0;
  ProtocolEvent next_event = ProtocolEvent::kInit;
  double acc_sum = 0;
  int acc_count = 0;
  while (f < static_cast<int>(seq.size())) {
    tracker.init(seq.frames[static_cast<std::size_t>(f)], seq.boxes[static_cast<std::size_t>(f)]);
    res.events.push_back({f, next_event});
    const int start = f;
    int g = f + 1;
    bool failed = false;
    for (; g < static_cast<int>(seq.size()); ++g) {
      const Box b = tracker.update(seq.frames[static_cast<std::size_t>(g)]);
      const double o = iou(b, seq.boxes[static_cast<std::size_t>(g)]);
      res.overlaps[static_cast<std::size_t>(g)] = o;
      if (o <= 0.0) {
        ++res.failures;
        res.events.push_back({g, ProtocolEvent::kFailure});
        failed = true;
        break;
      }
      if (g - start > protocol.burn_in) {
        acc_sum += o;
        ++acc_count;
      }
    }
    if (!failed) break;
    f = g + protocol.reinit_delay;
    next_event = ProtocolEvent::kReinit;
  }
  res.accuracy = acc_count > 0 ? acc_sum / acc_count : 0.0;
  return res;
}

}  // namespace siamattn
