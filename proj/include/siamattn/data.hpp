#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "siamattn/image.hpp"
#include "siamattn/params.hpp"

namespace siamattn {

struct SequenceRecord {
  std::string id;
  std::vector<Image> frames;
  std::vector<Box> boxes;
  std::vector<Mask> masks;     // empty when the sequence has no mask annotation
  std::vector<bool> visible;   // per frame; all true for loaded datasets

  std::size_t size() const { return frames.size(); }
  bool has_masks() const { return !masks.empty(); }
};

// SiamFC context window: side s with s^2 = (w + p)(h + p), p = amount * (w + h).
inline double context_side(double w, double h, double amount = 0.5) {
  const double p = amount * (w + h);
  return std::sqrt((w + p) * (h + p));
}

// Square source window mapped onto an out x out crop.
struct CropWindow {
  double cx = 0, cy = 0, side = 1;
  int out = 1;

  double scale() const { return side / out; }  // source pixels per crop pixel

  Box to_frame(const Box& b) const {
    return Box{cx + (b.cx - out / 2.0) * scale(), cy + (b.cy - out / 2.0) * scale(), b.w * scale(),
               b.h * scale()};
  }
  Box to_crop(const Box& b) const {
    return Box{out / 2.0 + (b.cx - cx) / scale(), out / 2.0 + (b.cy - cy) / scale(), b.w / scale(),
               b.h / scale()};
  }
};

struct CropConfig {
  int exemplar_size = 127;
  int search_size = 255;
  double context_amount = 0.5;
  // Search window side relative to the exemplar context side; 0 means search_size / exemplar_size.
  double search_ratio = 0;

  double ratio() const { return search_ratio > 0 ? search_ratio : static_cast<double>(search_size) / exemplar_size; }
};

struct CropPair {
  Image exemplar;
  Image search;
  Box gt_box_in_search;
  Mask gt_mask_in_search;  // soft values in [0, 1]; empty when unavailable
  CropWindow exemplar_window;
  CropWindow search_window;

  bool has_mask() const { return !gt_mask_in_search.empty(); }
};

inline CropWindow exemplar_window(const Box& box, const CropConfig& cfg) {
  SIAMATTN_CHECK(box.valid(), ErrorCode::kInvalidArgument, "crop: degenerate box");
  return CropWindow{box.cx, box.cy, context_side(box.w, box.h, cfg.context_amount), cfg.exemplar_size};
}

inline CropWindow search_window(double cx, double cy, const Box& size_ref, const CropConfig& cfg,
                                double scale = 1.0) {
  SIAMATTN_CHECK(size_ref.valid(), ErrorCode::kInvalidArgument, "crop: degenerate box");
  return CropWindow{cx, cy, context_side(size_ref.w, size_ref.h, cfg.context_amount) * cfg.ratio() * scale,
                    cfg.search_size};
}

inline Image crop_window(const Image& frame, const CropWindow& w) {
  return crop_resize(frame, w.cx, w.cy, w.side, w.out, frame.channel_mean());
}

// Exemplar around `box_z` in `frame_z`; search window around `box_x` in
// `frame_x`, displaced by `shift` (frame pixels) and scaled by `scale`.
inline CropPair crop_exemplar_search(const Image& frame_z, const Box& box_z, const Image& frame_x,
                                     const Box& box_x, const CropConfig& cfg, const Mask* mask_x = nullptr,
                                     double shift_x = 0, double shift_y = 0, double scale = 1.0) {
  SIAMATTN_CHECK(box_z.valid() && box_x.valid(), ErrorCode::kInvalidArgument, "crop: degenerate box");
  CropPair pair;
  pair.exemplar_window = exemplar_window(box_z, cfg);
  pair.exemplar = crop_window(frame_z, pair.exemplar_window);
  pair.search_window = search_window(box_x.cx + shift_x, box_x.cy + shift_y, box_x, cfg, scale);
  pair.search = crop_window(frame_x, pair.search_window);
  pair.gt_box_in_search = pair.search_window.to_crop(box_x);
  if (mask_x && !mask_x->empty()) {
    const auto& w = pair.search_window;
    pair.gt_mask_in_search = crop_resize(*mask_x, w.cx, w.cy, w.side, w.out, {0.f});
  }
  return pair;
}

// ---------------------------------------------------------------------------
// Synthetic sequences

enum class TargetShape { kEllipse, kRectangle };

struct OcclusionEvent {
  int start = 0;  // inclusive
  int end = 0;    // inclusive
};

struct SyntheticSpec {
  int length = 60;
  int width = 160;
  int height = 160;
  double target_w = 32;
  double target_h = 32;
  TargetShape shape = TargetShape::kEllipse;
  double speed = 2.0;  // pixels per frame; 0 keeps the target still
  int distractor_count = 2;
  std::vector<OcclusionEvent> occlusions;
  double deformation = 0.1;  // relative amplitude of the width/height oscillation
  double deformation_period = 24;
  double noise = 6;
  std::uint64_t seed = 1;

  void validate() const {
    SIAMATTN_CHECK(length > 0 && width >= 16 && height >= 16, ErrorCode::kInvalidArgument,
                   "synthetic spec: invalid frame geometry");
    SIAMATTN_CHECK(target_w >= 2 && target_h >= 2 && target_w * (1 + deformation) < width - 4 &&
                       target_h * (1 + deformation) < height - 4,
                   ErrorCode::kInvalidArgument, "synthetic spec: target does not fit the frame");
    SIAMATTN_CHECK(deformation >= 0 && deformation < 0.9 && deformation_period > 0, ErrorCode::kInvalidArgument,
                   "synthetic spec: invalid deformation");
    SIAMATTN_CHECK(speed >= 0 && distractor_count >= 0 && noise >= 0, ErrorCode::kInvalidArgument,
                   "synthetic spec: negative parameter");
    for (const auto& o : occlusions)
      SIAMATTN_CHECK(o.start >= 0 && o.end >= o.start, ErrorCode::kInvalidArgument,
                     "synthetic spec: invalid occlusion interval");
  }
};

namespace detail {

struct Blob {
  double cx, cy, vx, vy, w, h;
  std::array<float, 3> color_a, color_b;
  double stripe;  // stripe period in pixels
  double phase;
};

inline bool inside_shape(TargetShape shape, double px, double py, double cx, double cy, double w, double h) {
  const double dx = (px - cx) / (w / 2), dy = (py - cy) / (h / 2);
  if (shape == TargetShape::kEllipse) return dx * dx + dy * dy <= 1.0;
  return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
}

inline void step_blob(Blob& b, double max_w, double max_h, int width, int height, Rng& rng, double speed) {
  if (speed > 0) {
    std::normal_distribution<double> turn(0.0, 0.15);
    const double ang = std::atan2(b.vy, b.vx) + turn(rng);
    b.vx = speed * std::cos(ang);
    b.vy = speed * std::sin(ang);
  }
  b.cx += b.vx;
  b.cy += b.vy;
  const double lx = max_w / 2 + 2, hx = width - max_w / 2 - 2;
  const double ly = max_h / 2 + 2, hy = height - max_h / 2 - 2;
  if (b.cx < lx || b.cx > hx) {
    b.vx = -b.vx;
    b.cx = std::clamp(b.cx, lx, hx);
  }
  if (b.cy < ly || b.cy > hy) {
    b.vy = -b.vy;
    b.cy = std::clamp(b.cy, ly, hy);
  }
}

inline void paint_blob(Image& img, Mask* mask, const Blob& b, TargetShape shape, double w, double h) {
  const int x1 = std::max(0, static_cast<int>(std::floor(b.cx - w / 2)) - 1);
  const int x2 = std::min(img.width - 1, static_cast<int>(std::ceil(b.cx + w / 2)) + 1);
  const int y1 = std::max(0, static_cast<int>(std::floor(b.cy - h / 2)) - 1);
  const int y2 = std::min(img.height - 1, static_cast<int>(std::ceil(b.cy + h / 2)) + 1);
  for (int y = y1; y <= y2; ++y) {
    for (int x = x1; x <= x2; ++x) {
      if (!inside_shape(shape, x + 0.5, y + 0.5, b.cx, b.cy, w, h)) continue;
      const double u = (x + 0.5 - b.cx) + (y + 0.5 - b.cy) * 0.5;
      const bool stripe = std::fmod(std::abs(u + b.phase), b.stripe) < b.stripe / 2;
      const auto& col = stripe ? b.color_a : b.color_b;
      for (int c = 0; c < img.channels; ++c) img.at(c, y, x) = col[static_cast<std::size_t>(c)];
      if (mask) mask->at(0, y, x) = 1.f;
    }
  }
}

}  // namespace detail

// Deterministic given spec.seed. Masks are amodal: they keep the full target
// silhouette during occlusion, while `visible` is false for occluded frames.
inline SequenceRecord generate_synthetic_sequence(const SyntheticSpec& spec, const std::string& id = "synthetic") {
  spec.validate();
  Rng rng(spec.seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  SequenceRecord rec;
  rec.id = id;

  // Low-frequency background.
  Image background(3, spec.height, spec.width);
  struct Wave {
    double fx, fy, phase, amp;
  };
  for (int c = 0; c < 3; ++c) {
    std::vector<Wave> waves;
    for (int i = 0; i < 4; ++i)
      waves.push_back({uni(rng) * 0.08, uni(rng) * 0.08, uni(rng) * 6.283, 15 + 20 * uni(rng)});
    const double base = 90 + 60 * uni(rng);
    for (int y = 0; y < spec.height; ++y)
      for (int x = 0; x < spec.width; ++x) {
        double v = base;
        for (const auto& w : waves) v += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
        background.at(c, y, x) = static_cast<float>(v);
      }
  }

  const double max_w = spec.target_w * (1 + spec.deformation), max_h = spec.target_h * (1 + spec.deformation);
  auto make_blob = [&](const std::array<float, 3>& ca, const std::array<float, 3>& cb, double w, double h) {
    detail::Blob b{};
    b.w = w;
    b.h = h;
    b.cx = max_w / 2 + 2 + uni(rng) * (spec.width - max_w - 4);
    b.cy = max_h / 2 + 2 + uni(rng) * (spec.height - max_h - 4);
    const double ang = uni(rng) * 2 * std::numbers::pi;
    b.vx = spec.speed * std::cos(ang);
    b.vy = spec.speed * std::sin(ang);
    b.color_a = ca;
    b.color_b = cb;
    b.stripe = 6 + 4 * uni(rng);
    b.phase = uni(rng) * 10;
    return b;
  };
  auto rand_color = [&]() {
    return std::array<float, 3>{static_cast<float>(30 + 200 * uni(rng)), static_cast<float>(30 + 200 * uni(rng)),
                                static_cast<float>(30 + 200 * uni(rng))};
  };
  const auto ca = rand_color(), cb = rand_color();
  detail::Blob target = make_blob(ca, cb, spec.target_w, spec.target_h);
  std::vector<detail::Blob> distractors;
  for (int i = 0; i < spec.distractor_count; ++i) {
    auto jitter = [&](std::array<float, 3> c) {
      for (auto& v : c) v = std::clamp(v + static_cast<float>(uni(rng) * 60 - 30), 0.f, 255.f);
      return c;
    };
    distractors.push_back(make_blob(jitter(ca), jitter(cb), spec.target_w * (0.8 + 0.4 * uni(rng)),
                                    spec.target_h * (0.8 + 0.4 * uni(rng))));
  }
  const std::array<float, 3> occluder{static_cast<float>(60 + 100 * uni(rng)), static_cast<float>(60 + 100 * uni(rng)),
                                      static_cast<float>(60 + 100 * uni(rng))};

  std::normal_distribution<double> noise(0.0, 1.0);
  for (int t = 0; t < spec.length; ++t) {
    if (t > 0) {
      detail::step_blob(target, max_w, max_h, spec.width, spec.height, rng, spec.speed);
      for (auto& d : distractors) detail::step_blob(d, max_w, max_h, spec.width, spec.height, rng, spec.speed);
    }
    const double s = spec.deformation * std::sin(2 * std::numbers::pi * t / spec.deformation_period);
    const double w = spec.target_w * (1 + s), h = spec.target_h * (1 - s);
    Image frame = background;
    for (const auto& d : distractors) detail::paint_blob(frame, nullptr, d, spec.shape, d.w, d.h);
    Mask mask(1, spec.height, spec.width);
    detail::paint_blob(frame, &mask, target, spec.shape, w, h);
    const Box box = mask_tight_box(mask);
    bool occluded = false;
    for (const auto& o : spec.occlusions) occluded = occluded || (t >= o.start && t <= o.end);
    if (occluded) {
      const int x1 = std::max(0, static_cast<int>(std::floor(box.x1())) - 3);
      const int x2 = std::min(spec.width, static_cast<int>(std::ceil(box.x2())) + 3);
      const int y1 = std::max(0, static_cast<int>(std::floor(box.y1())) - 3);
      const int y2 = std::min(spec.height, static_cast<int>(std::ceil(box.y2())) + 3);
      for (int y = y1; y < y2; ++y)
        for (int x = x1; x < x2; ++x)
          for (int c = 0; c < 3; ++c) frame.at(c, y, x) = occluder[static_cast<std::size_t>(c)];
    }
    if (spec.noise > 0) {
      for (auto& v : frame.data) v = std::clamp(static_cast<float>(v + spec.noise * noise(rng)), 0.f, 255.f);
    } else {
      for (auto& v : frame.data) v = std::clamp(v, 0.f, 255.f);
    }
    for (auto& v : frame.data) v = std::round(v);
    rec.frames.push_back(std::move(frame));
    rec.boxes.push_back(box);
    rec.masks.push_back(std::move(mask));
    rec.visible.push_back(!occluded);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/<sequence>/groundtruth.txt plus frame images. Each
// annotation line is `frame_index cx cy w h [mask_path]`, paths relative to
// the sequence directory; frames are named %05d.ppm.

inline std::string frame_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu.ppm", index);
  return buf;
}

inline void write_sequence(const std::filesystem::path& root, const SequenceRecord& rec) {
  namespace fs = std::filesystem;
  const fs::path dir = root / rec.id;
  fs::create_directories(dir);
  if (rec.has_masks()) fs::create_directories(dir / "masks");
  std::ofstream gt(dir / "groundtruth.txt");
  SIAMATTN_CHECK(gt.good(), ErrorCode::kIo, "cannot write " + (dir / "groundtruth.txt").string());
  gt.precision(17);
  for (std::size_t i = 0; i < rec.size(); ++i) {
    write_pnm((dir / frame_file_name(i)).string(), rec.frames[i]);
    const Box& b = rec.boxes[i];
    gt << i << ' ' << b.cx << ' ' << b.cy << ' ' << b.w << ' ' << b.h;
    if (rec.has_masks()) {
      char name[32];
      std::snprintf(name, sizeof(name), "masks/%05zu.pgm", i);
      write_pnm((dir / name).string(), mask_to_image(rec.masks[i]));
      gt << ' ' << name;
    }
    gt << '\n';
  }
}

// Reads one sequence directory. Returns nullopt (and counts a warning) when
// any annotation line or referenced file is malformed.
inline std::optional<SequenceRecord> read_sequence(const std::filesystem::path& dir, int& warnings) {
  const auto gt_path = dir / "groundtruth.txt";
  SIAMATTN_CHECK(std::filesystem::exists(gt_path), ErrorCode::kDataset,
                 "missing annotation file " + gt_path.string());
  std::ifstream in(gt_path);
  SIAMATTN_CHECK(in.good(), ErrorCode::kIo, "cannot read " + gt_path.string());
  SequenceRecord rec;
  rec.id = dir.filename().string();
  std::string line;
  bool any_mask = false, any_unmasked = false;
  try {
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::istringstream ls(line);
      long index = -1;
      double cx, cy, w, h;
      if (!(ls >> index >> cx >> cy >> w >> h) || index != static_cast<long>(rec.frames.size()) || !(w > 0) ||
          !(h > 0)) {
        throw Error(ErrorCode::kDataset, "malformed annotation line: " + line);
      }
      std::string mask_path, extra;
      ls >> mask_path;
      if (ls >> extra) throw Error(ErrorCode::kDataset, "trailing tokens in annotation line: " + line);
      rec.frames.push_back(read_pnm((dir / frame_file_name(static_cast<std::size_t>(index))).string()));
      rec.boxes.push_back(Box{cx, cy, w, h});
      rec.visible.push_back(true);
      if (!mask_path.empty()) {
        rec.masks.push_back(image_to_mask(read_pnm((dir / mask_path).string())));
        any_mask = true;
      } else {
        any_unmasked = true;
      }
    }
    if (rec.frames.empty()) throw Error(ErrorCode::kDataset, "empty sequence " + rec.id);
    if (any_mask && any_unmasked) throw Error(ErrorCode::kDataset, "partial mask annotation in " + rec.id);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kDataset || e.code() == ErrorCode::kIo) {
      ++warnings;
      return std::nullopt;
    }
    throw;
  }
  return rec;
}

// Frame images of a directory (any *.ppm / *.pgm), in file-name order.
inline std::vector<Image> read_frames(const std::filesystem::path& dir) {
  SIAMATTN_CHECK(std::filesystem::is_directory(dir), ErrorCode::kIo, "sequence directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> frames;
  for (const auto& f : files) frames.push_back(read_pnm(f.string()));
  return frames;
}

// Streams sequence records from a dataset root, one directory at a time.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& root) {
    SIAMATTN_CHECK(std::filesystem::is_directory(root), ErrorCode::kIo, "dataset root not found: " + root.string());
    for (const auto& entry : std::filesystem::directory_iterator(root))
      if (entry.is_directory()) dirs_.push_back(entry.path());
    std::sort(dirs_.begin(), dirs_.end());
  }

  std::optional<SequenceRecord> next() {
    while (pos_ < dirs_.size()) {
      auto rec = read_sequence(dirs_[pos_++], warnings_);
      if (rec) return rec;
    }
    return std::nullopt;
  }

  int warnings() const { return warnings_; }
  std::size_t directory_count() const { return dirs_.size(); }

 private:
  std::vector<std::filesystem::path> dirs_;
  std::size_t pos_ = 0;
  int warnings_ = 0;
};

inline DatasetReader load_dataset(const std::filesystem::path& root) { return DatasetReader(root); }

inline std::vector<SequenceRecord> load_all(const std::filesystem::path& root, int* warnings = nullptr) {
  DatasetReader reader(root);
  std::vector<SequenceRecord> out;
  while (auto rec = reader.next()) out.push_back(std::move(*rec));
  if (warnings) *warnings = reader.warnings();
  return out;
}

// ---------------------------------------------------------------------------
// Training pairs

struct PairSamplerConfig {
  int max_gap = 50;
  double shift = 0.15;         // max search-centre shift, fraction of the search window side
  double scale_jitter = 0.05;  // log-uniform search scale in [1 - j, 1 + j]
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Pair i is a pure function of (seed, i).
class PairSampler {
 public:
  PairSampler(const std::vector<SequenceRecord>& sequences, CropConfig crop, PairSamplerConfig cfg,
              std::uint64_t seed)
      : sequences_(&sequences), crop_(crop), cfg_(cfg), seed_(seed) {
    SIAMATTN_CHECK(!sequences.empty(), ErrorCode::kDataset, "pair sampler needs at least one sequence");
    for (const auto& s : sequences)
      SIAMATTN_CHECK(s.size() > 0 && s.boxes.size() == s.size(), ErrorCode::kDataset,
                     "sequence " + s.id + " has no frames or inconsistent annotations");
  }

  CropPair sample(std::uint64_t index) const {
    Rng rng(mix_seed(seed_, index));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const auto& seqs = *sequences_;
    const auto& seq = seqs[static_cast<std::size_t>(uni(rng) * seqs.size()) % seqs.size()];
    std::vector<int> vis;
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (seq.visible.empty() || seq.visible[i]) vis.push_back(static_cast<int>(i));
    if (vis.empty()) vis.push_back(0);
    const int a = vis[static_cast<std::size_t>(uni(rng) * vis.size()) % vis.size()];
    std::vector<int> near;
    for (int i : vis)
      if (std::abs(i - a) <= cfg_.max_gap) near.push_back(i);
    const int b = near[static_cast<std::size_t>(uni(rng) * near.size()) % near.size()];
    const double scale = std::exp((uni(rng) * 2 - 1) * std::log1p(cfg_.scale_jitter));
    const double side = context_side(seq.boxes[b].w, seq.boxes[b].h, crop_.context_amount) * crop_.ratio();
    const double sx = (uni(rng) * 2 - 1) * cfg_.shift * side, sy = (uni(rng) * 2 - 1) * cfg_.shift * side;
    const Mask* mask = seq.has_masks() ? &seq.masks[static_cast<std::size_t>(b)] : nullptr;
    return crop_exemplar_search(seq.frames[static_cast<std::size_t>(a)], seq.boxes[static_cast<std::size_t>(a)],
                                seq.frames[static_cast<std::size_t>(b)], seq.boxes[static_cast<std::size_t>(b)],
                                crop_, mask, sx, sy, scale);
  }

 private:
  const std::vector<SequenceRecord>* sequences_;
  CropConfig crop_;
  PairSamplerConfig cfg_;
  std::uint64_t seed_;
};

// A family of synthetic sequences with per-sequence variation drawn from `seed`.
struct SyntheticSuiteConfig {
  int count = 20;
  SyntheticSpec base;
  double size_jitter = 0.25;           // target sides vary by this relative amount
  double occlusion_probability = 0.5;  // chance of one occlusion event per sequence
  int occlusion_length = 4;
  std::uint64_t seed = 1000;
};

inline std::vector<SequenceRecord> generate_synthetic_suite(const SyntheticSuiteConfig& cfg,
                                                            const std::string& prefix = "seq") {
  std::vector<SequenceRecord> out;
  for (int i = 0; i < cfg.count; ++i) {
    Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    SyntheticSpec spec = cfg.base;
    spec.seed = mix_seed(cfg.seed ^ 0xABCDULL, static_cast<std::uint64_t>(i));
    spec.target_w = cfg.base.target_w * (1 + cfg.size_jitter * (2 * uni(rng) - 1));
    spec.target_h = cfg.base.target_h * (1 + cfg.size_jitter * (2 * uni(rng) - 1));
    spec.shape = uni(rng) < 0.5 ? TargetShape::kEllipse : TargetShape::kRectangle;
    spec.occlusions.clear();
    if (uni(rng) < cfg.occlusion_probability && spec.length > cfg.occlusion_length + 4) {
      const int start = 2 + static_cast<int>(uni(rng) * (spec.length - cfg.occlusion_length - 3));
      spec.occlusions.push_back({start, start + cfg.occlusion_length - 1});
    }
    char id[64];
    std::snprintf(id, sizeof(id), "%s%03d", prefix.c_str(), i);
    out.push_back(generate_synthetic_sequence(spec, id));
  }
  return out;
}

}  // namespace siamattn
