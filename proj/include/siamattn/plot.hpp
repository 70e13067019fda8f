#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "siamattn/image.hpp"
#include "siamattn/metrics.hpp"
#include "siamattn/model.hpp"

namespace siamattn {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

// Minimal line chart with axes, ticks and a legend; x and y in [x0,x1]x[0,1].
inline void write_line_plot_svg(const std::string& path, const std::string& title, const std::string& xlabel,
                                const std::string& ylabel, const std::vector<Series>& series, double x0, double x1,
                                const std::string& note = "") {
  const double W = 480, H = 360, L = 60, R = 20, Tp = 40, B = 50;
  const double pw = W - L - R, ph = H - Tp - B;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return Tp + (1.0 - std::clamp(y, 0.0, 1.0)) * ph; };
  static const std::array<const char*, 8> colors = {"#d62728", "#1f77b4", "#2ca02c", "#ff7f0e",
                                                    "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  s << "<rect x=\"" << L << "\" y=\"" << Tp << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double fx = x0 + (x1 - x0) * i / 5.0, fy = i / 5.0;
    s << "<line x1=\"" << px(fx) << "\" y1=\"" << Tp + ph << "\" x2=\"" << px(fx) << "\" y2=\"" << Tp + ph + 5
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << px(fx) << "\" y=\"" << Tp + ph + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
      << std::setprecision(x1 - x0 > 5 ? 0 : 1) << fx << std::setprecision(2) << "</text>\n";
    s << "<line x1=\"" << L - 5 << "\" y1=\"" << py(fy) << "\" x2=\"" << L << "\" y2=\"" << py(fy)
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << L - 8 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << std::setprecision(1) << fy << std::setprecision(2) << "</text>\n";
  }
  s << "<text x=\"" << L + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">" << xlabel
    << "</text>\n";
  s << "<text x=\"16\" y=\"" << Tp + ph / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
    << Tp + ph / 2 << ")\">" << ylabel << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& sr = series[i];
    const char* c = colors[i % colors.size()];
    s << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (std::size_t j = 0; j < sr.x.size() && j < sr.y.size(); ++j) s << px(sr.x[j]) << ',' << py(sr.y[j]) << ' ';
    s << "\"/>\n";
    const double ly = Tp + 16 + 16.0 * static_cast<double>(i);
    s << "<line x1=\"" << W - R - 150 << "\" y1=\"" << ly << "\" x2=\"" << W - R - 130 << "\" y2=\"" << ly
      << "\" stroke=\"" << c << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - R - 125 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">" << sr.label << "</text>\n";
  }
  if (!note.empty())
    s << "<text x=\"" << W - 4 << "\" y=\"" << H - 2 << "\" text-anchor=\"end\" font-size=\"8\" fill=\"#666\">"
      << note << "</text>\n";
  s << "</svg>\n";
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  SIAMATTN_CHECK(out.good(), ErrorCode::kIo, "cannot write plot " + path);
  out << s.str();
}

inline std::string format_score(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << v;
  return os.str();
}

// Success (IoU threshold) and precision (centre error threshold) plots.
inline void write_metric_plots(const std::string& dir, const std::vector<std::pair<std::string, MetricReport>>& reports,
                               const std::string& hash) {
  std::vector<Series> success, precision;
  for (const auto& [label, r] : reports) {
    Series s{label + " [" + format_score(r.auc) + "]", {}, r.success_curve};
    for (int i = 0; i < kSuccessThresholds; ++i) s.x.push_back(i / 100.0);
    success.push_back(std::move(s));
    Series p{label + " [" + format_score(r.precision_at_20) + "]", {}, r.precision_curve};
    for (std::size_t i = 0; i < r.precision_curve.size(); ++i) p.x.push_back(static_cast<double>(i));
    precision.push_back(std::move(p));
  }
  const std::string note = "config " + hash;
  write_line_plot_svg((std::filesystem::path(dir) / "success.svg").string(), "Success plot", "Overlap threshold",
                      "Success rate", success, 0.0, 1.0, note);
  write_line_plot_svg((std::filesystem::path(dir) / "precision.svg").string(), "Precision plot",
                      "Location error threshold (px)", "Precision", precision, 0.0, 50.0, note);
}

// Min-max normalised grayscale image of a 2-D tensor (or the channel mean of a 3-D one).
template <typename T>
Image tensor_to_gray(const Tensor<T>& t) {
  int h, w;
  std::vector<double> v;
  if (t.rank() == 2) {
    h = t.dim(0);
    w = t.dim(1);
    v.assign(t.data(), t.data() + t.size());
  } else {
    SIAMATTN_CHECK(t.rank() == 3, ErrorCode::kShapeMismatch, "tensor_to_gray: rank 2 or 3 expected");
    const int c = t.dim(0);
    h = t.dim(1);
    w = t.dim(2);
    v.assign(static_cast<std::size_t>(h) * w, 0.0);
    for (int k = 0; k < c; ++k)
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += t[static_cast<std::size_t>(k) * v.size() + i] / c;
  }
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double span = *hi - *lo;
  Image img(1, h, w);
  for (std::size_t i = 0; i < v.size(); ++i)
    img.data[i] = span > 0 ? static_cast<float>(std::round(255.0 * (v[i] - *lo) / span)) : 0.f;
  return img;
}

// Per-anchor-location foreground confidence, max over anchor shapes.
template <typename T>
Tensor<T> confidence_map(const Tensor<T>& cls, int k) {
  const int h = cls.dim(1), w = cls.dim(2);
  const auto scores = foreground_scores(cls, k);
  Tensor<T> out(Shape{h, w});
  for (int a = 0; a < k; ++a)
    for (int i = 0; i < h * w; ++i)
      out[static_cast<std::size_t>(i)] =
          a == 0 ? static_cast<T>(scores[static_cast<std::size_t>(i)])
                 : std::max(out[static_cast<std::size_t>(i)], static_cast<T>(scores[static_cast<std::size_t>(a * h * w + i)]));
  return out;
}

// Writes stage{k}_{branch}_{kind}.pgm for k = 3..5, branch in {template, search}
// and kind in {spatial, channel, cross, features}, plus stage{k}_search_confidence.pgm
// and fused_confidence.pgm. Returns the written file names.
template <typename T>
std::vector<std::string> dump_attention_maps(const std::string& dir, const ModelOutput<T>& out, int k) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const Tensor<T>& t) {
    if (t.size() == 0) return;
    write_pnm((std::filesystem::path(dir) / name).string(), tensor_to_gray(t));
    written.push_back(name);
  };
  for (int s = 0; s < 3; ++s) {
    const std::string stage = "stage" + std::to_string(s + 3) + "_";
    const auto& tr = out.traces[static_cast<std::size_t>(s)];
    emit(stage + "template_spatial.pgm", tr.z.spatial);
    emit(stage + "template_channel.pgm", tr.z.channel);
    emit(stage + "template_cross.pgm", tr.z.cross);
    emit(stage + "search_spatial.pgm", tr.x.spatial);
    emit(stage + "search_channel.pgm", tr.x.channel);
    emit(stage + "search_cross.pgm", tr.x.cross);
    emit(stage + "template_features.pgm", out.z_attn[static_cast<std::size_t>(s)].value());
    emit(stage + "search_features.pgm", out.x_attn[static_cast<std::size_t>(s)].value());
    emit(stage + "search_confidence.pgm", confidence_map(out.per_stage[static_cast<std::size_t>(s)].cls.value(), k));
  }
  emit("fused_confidence.pgm", confidence_map(out.fused.cls.value(), k));
  return written;
}

inline void draw_line(Image& img, double x0, double y0, double x1, double y1, const std::array<float, 3>& color) {
  const int n = static_cast<int>(std::ceil(std::max(std::abs(x1 - x0), std::abs(y1 - y0)))) + 1;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
    for (int c = 0; c < img.channels; ++c) img.at(c, y, x) = color[static_cast<std::size_t>(std::min(c, 2))];
  }
}

inline void draw_rotated_box(Image& img, const RotatedBox& r, const std::array<float, 3>& color) {
  const auto pts = r.corners();
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& a = pts[i];
    const auto& b = pts[(i + 1) % 4];
    draw_line(img, a.x, a.y, b.x, b.y, color);
  }
}

}  // namespace siamattn
