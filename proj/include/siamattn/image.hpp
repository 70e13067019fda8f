#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "siamattn/geometry.hpp"
#include "siamattn/tensor.hpp"

namespace siamattn {

// Planar 8-bit-range image stored as float, channels x height x width.
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool empty() const { return data.empty(); }

  std::vector<float> channel_mean() const {
    std::vector<float> m(static_cast<std::size_t>(channels), 0.f);
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    if (plane == 0) return m;
    for (int c = 0; c < channels; ++c) {
      double s = 0;
      for (std::size_t i = 0; i < plane; ++i) s += data[c * plane + i];
      m[static_cast<std::size_t>(c)] = static_cast<float>(s / plane);
    }
    return m;
  }

  bool operator==(const Image&) const = default;
};

// Bilinear read with edge clamping.
inline float sample_clamped(const Image& img, int c, double y, double x) {
  y = std::clamp(y, 0.0, img.height - 1.0);
  x = std::clamp(x, 0.0, img.width - 1.0);
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - y0, fx = x - x0;
  return static_cast<float>((1 - fy) * ((1 - fx) * img.at(c, y0, x0) + fx * img.at(c, y0, x1)) +
                            fy * ((1 - fx) * img.at(c, y1, x0) + fx * img.at(c, y1, x1)));
}

// Square source window resampled to out x out pixels. Samples whose centre
// falls outside the image take `fill` (one value per channel).
inline Image crop_resize(const Image& img, double cx, double cy, double side, int out,
                         const std::vector<float>& fill) {
  Image dst(img.channels, out, out);
  const double scale = side / out;
  const double x0 = cx - side / 2, y0 = cy - side / 2;
  for (int y = 0; y < out; ++y) {
    const double sy = y0 + (y + 0.5) * scale;
    for (int x = 0; x < out; ++x) {
      const double sx = x0 + (x + 0.5) * scale;
      const bool inside = sy >= 0 && sy < img.height && sx >= 0 && sx < img.width;
      for (int c = 0; c < img.channels; ++c) {
        dst.at(c, y, x) = inside ? sample_clamped(img, c, sy - 0.5, sx - 0.5) : fill[static_cast<std::size_t>(c)];
      }
    }
  }
  return dst;
}

// Network input: values mapped from [0, 255] to [-0.5, 0.5].
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  Tensor<T> t(Shape{img.channels, img.height, img.width});
  for (std::size_t i = 0; i < img.data.size(); ++i) t[i] = static_cast<T>(img.data[i] / 255.0 - 0.5);
  return t;
}

namespace detail {
inline void skip_pnm_ws(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}
}  // namespace detail

// Binary PPM (P6, 3 channels) or PGM (P5, 1 channel), maxval 255.
inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  SIAMATTN_CHECK(in.good(), ErrorCode::kIo, "cannot open image " + path);
  std::string magic;
  in >> magic;
  SIAMATTN_CHECK(magic == "P6" || magic == "P5", ErrorCode::kIo, "unsupported image format in " + path);
  int w = 0, h = 0, maxval = 0;
  detail::skip_pnm_ws(in);
  in >> w;
  detail::skip_pnm_ws(in);
  in >> h;
  detail::skip_pnm_ws(in);
  in >> maxval;
  in.get();
  SIAMATTN_CHECK(in.good() && w > 0 && h > 0 && maxval == 255, ErrorCode::kIo, "bad image header in " + path);
  const int c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> buf(static_cast<std::size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  SIAMATTN_CHECK(in.gcount() == static_cast<std::streamsize>(buf.size()), ErrorCode::kIo,
                 "truncated image " + path);
  Image img(c, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) img.at(ch, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * c + ch];
  return img;
}

inline void write_pnm(const std::string& path, const Image& img) {
  SIAMATTN_CHECK(img.channels == 1 || img.channels == 3, ErrorCode::kInvalidArgument,
                 "write_pnm needs 1 or 3 channels");
  std::ofstream out(path, std::ios::binary);
  SIAMATTN_CHECK(out.good(), ErrorCode::kIo, "cannot write image " + path);
  out << (img.channels == 3 ? "P6" : "P5") << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.data.size());
  std::size_t i = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        buf[i++] = static_cast<unsigned char>(std::clamp(std::lround(img.at(c, y, x)), 0L, 255L));
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

// Binary mask (values 0 / 1) as a single-channel image.
using Mask = Image;

inline Image mask_to_image(const Mask& m) {
  Image img = m;
  for (auto& v : img.data) v = v > 0.5f ? 255.f : 0.f;
  return img;
}

inline Mask image_to_mask(const Image& img) {
  Mask m = img;
  for (auto& v : m.data) v = v > 127.f ? 1.f : 0.f;
  return m;
}

// Tight box of the nonzero pixels, or an invalid box when empty.
inline Box mask_tight_box(const Mask& m) {
  int x1 = m.width, y1 = m.height, x2 = -1, y2 = -1;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(0, y, x) > 0.5f) {
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
  if (x2 < 0) return Box{};
  return Box::from_corners(x1, y1, x2 + 1.0, y2 + 1.0);
}

inline void draw_box_outline(Image& img, const Box& b, const std::array<float, 3>& color) {
  const int x1 = static_cast<int>(std::lround(b.x1())), x2 = static_cast<int>(std::lround(b.x2())) - 1;
  const int y1 = static_cast<int>(std::lround(b.y1())), y2 = static_cast<int>(std::lround(b.y2())) - 1;
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    for (int c = 0; c < img.channels; ++c) img.at(c, y, x) = color[static_cast<std::size_t>(std::min(c, 2))];
  };
  for (int x = x1; x <= x2; ++x) {
    put(x, y1);
    put(x, y2);
  }
  for (int y = y1; y <= y2; ++y) {
    put(x1, y);
    put(x2, y);
  }
}

}  // namespace siamattn
