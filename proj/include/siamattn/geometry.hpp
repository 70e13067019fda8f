#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "siamattn/error.hpp"

namespace siamattn {

// Axis-aligned box in continuous pixel coordinates (pixel i spans [i, i+1)).
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;

  static Box from_corners(double x1, double y1, double x2, double y2) {
    return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
  }

  double x1() const { return cx - w / 2; }
  double y1() const { return cy - h / 2; }
  double x2() const { return cx + w / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return std::max(0.0, w) * std::max(0.0, h); }
  bool valid() const { return w > 0 && h > 0 && std::isfinite(cx) && std::isfinite(cy); }

  bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  return (iw > 0 && ih > 0) ? iw * ih : 0.0;
}

inline double iou(const Box& a, const Box& b) {
  // Corner arithmetic can round the overlap of identical boxes above their area.
  const double inter = std::min({intersection_area(a, b), a.area(), b.area()});
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline Box clip_box(const Box& b, double width, double height) {
  const double x1 = std::clamp(b.x1(), 0.0, width), x2 = std::clamp(b.x2(), 0.0, width);
  const double y1 = std::clamp(b.y1(), 0.0, height), y2 = std::clamp(b.y2(), 0.0, height);
  return Box::from_corners(x1, y1, x2, y2);
}

// Regression target relative to a reference box: centre shifts in units of
// the reference size, log size ratios.
struct BoxDelta {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

inline BoxDelta encode(const Box& box, const Box& ref) {
  SIAMATTN_CHECK(box.valid() && ref.valid(), ErrorCode::kInvalidArgument, "encode: degenerate box");
  return BoxDelta{(box.cx - ref.cx) / ref.w, (box.cy - ref.cy) / ref.h, std::log(box.w / ref.w),
                  std::log(box.h / ref.h)};
}

inline Box decode(const BoxDelta& d, const Box& ref) {
  return Box{ref.cx + d.tx * ref.w, ref.cy + d.ty * ref.h, ref.w * std::exp(d.tw),
             ref.h * std::exp(d.th)};
}

struct Point2 {
  double x = 0, y = 0;
};

// Rotated rectangle; angle in degrees in [0, 90), measured from the x axis to
// the side of length w.
struct RotatedBox {
  double cx = 0, cy = 0, w = 0, h = 0, angle = 0;
  double area() const { return w * h; }

  std::array<Point2, 4> corners() const {
    const double a = angle * std::numbers::pi / 180.0;
    const double ux = std::cos(a) * w / 2, uy = std::sin(a) * w / 2;
    const double vx = -std::sin(a) * h / 2, vy = std::cos(a) * h / 2;
    return {Point2{cx - ux - vx, cy - uy - vy}, Point2{cx + ux - vx, cy + uy - vy}, Point2{cx + ux + vx, cy + uy + vy},
            Point2{cx - ux + vx, cy - uy + vy}};
  }
};

// Andrew's monotone chain; returns the hull counter-clockwise without repeats.
inline std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end(),
            [](const Point2& a, const Point2& b) { return a.x < b.x || (a.x == b.x && a.y < b.y); });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Point2& a, const Point2& b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  if (pts.size() < 3) return pts;
  auto cross = [](const Point2& o, const Point2& a, const Point2& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
  };
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i > 0; --i) {
    const auto& p = pts[i - 1];
    while (k >= t && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  hull.resize(k - 1);
  return hull;
}

// Minimum-area enclosing rectangle: one side is collinear with a hull edge,
// so every edge direction is tried.
inline RotatedBox min_area_rect(const std::vector<Point2>& points) {
  SIAMATTN_CHECK(!points.empty(), ErrorCode::kInvalidArgument, "min_area_rect of empty set");
  const auto hull = convex_hull(points);
  if (hull.size() < 3) {
    double x1 = hull[0].x, x2 = hull[0].x, y1 = hull[0].y, y2 = hull[0].y;
    for (const auto& p : hull) {
      x1 = std::min(x1, p.x), x2 = std::max(x2, p.x), y1 = std::min(y1, p.y), y2 = std::max(y2, p.y);
    }
    return RotatedBox{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, 0.0};
  }
  RotatedBox best;
  double best_area = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const auto& a = hull[i];
    const auto& b = hull[(i + 1) % hull.size()];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    if (len == 0) continue;
    const double ux = (b.x - a.x) / len, uy = (b.y - a.y) / len;
    double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
    for (const auto& p : hull) {
      const double u = p.x * ux + p.y * uy;
      const double v = -p.x * uy + p.y * ux;
      umin = std::min(umin, u), umax = std::max(umax, u);
      vmin = std::min(vmin, v), vmax = std::max(vmax, v);
    }
    const double area = (umax - umin) * (vmax - vmin);
    if (area < best_area - 1e-9) {
      best_area = area;
      const double uc = (umin + umax) / 2, vc = (vmin + vmax) / 2;
      best.cx = uc * ux - vc * uy;
      best.cy = uc * uy + vc * ux;
      best.w = umax - umin;
      best.h = vmax - vmin;
      best.angle = std::atan2(uy, ux) * 180.0 / std::numbers::pi;
    }
  }
  // Normalise the angle into [0, 90), swapping sides as needed.
  double ang = std::fmod(best.angle, 180.0);
  if (ang < 0) ang += 180.0;
  if (ang >= 90.0) {
    ang -= 90.0;
    std::swap(best.w, best.h);
  }
  if (ang > 90.0 - 1e-9) ang = 0.0;
  best.angle = ang;
  return best;
}

}  // namespace siamattn
