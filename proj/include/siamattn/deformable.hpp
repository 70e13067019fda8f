#pragma once

#include <array>
#include <vector>

#include "siamattn/conv.hpp"

namespace siamattn {

// Deformable convolution. `offset` holds 2 * k * k channels over the output
// grid: channel 2t is the y shift and 2t + 1 the x shift of kernel tap t
// (row-major taps). Samples are bilinear; locations outside the map read 0.
template <typename T>
Var<T> deform_conv2d(const Var<T>& x, const Var<T>& offset, const Var<T>& weight, const Var<T>& bias,
                     const ConvGeometry& g) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int o = weight.dim(0), k = weight.dim(2);
  SIAMATTN_CHECK(weight.dim(1) == c, ErrorCode::kShapeMismatch,
                 "deform_conv2d weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  const int oh = g.output_size(h, k), ow = g.output_size(w, k);
  const int taps = k * k;
  SIAMATTN_CHECK(offset.value().rank() == 3 && offset.dim(0) == 2 * taps && offset.dim(1) == oh &&
                     offset.dim(2) == ow,
                 ErrorCode::kShapeMismatch,
                 "deform_conv2d offset shape " + shape_str(offset.shape()) + " does not match output grid");
  const int p = oh * ow;
  const int ck = c * taps;
  Tensor<T> cols(Shape{ck, p});
  const T* off = offset.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = x.value().data() + static_cast<std::size_t>(ch) * h * w;
    for (int t = 0; t < taps; ++t) {
      const int ky = t / k, kx = t % k;
      const T* offy = off + static_cast<std::size_t>(2 * t) * p;
      const T* offx = off + static_cast<std::size_t>(2 * t + 1) * p;
      T* dst = cols.data() + static_cast<std::size_t>(ch * taps + t) * p;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const int q = oy * ow + ox;
          const T sy = static_cast<T>(oy * g.stride - g.pad_begin + ky * g.dilation) + offy[q];
          const T sx = static_cast<T>(ox * g.stride - g.pad_begin + kx * g.dilation) + offx[q];
          dst[q] = detail::bilinear_zero(plane, h, w, sy, sx);
        }
      }
    }
  }
  Tensor<T> out(Shape{o, oh, ow});
  {
    ConstMapMat<T> W(weight.value().data(), o, ck);
    ConstMapMat<T> X(cols.data(), ck, p);
    MapMat<T> Y(out.data(), o, p);
    Y.noalias() = W * X;
    if (bias.defined()) {
      for (int i = 0; i < o; ++i) Y.row(i).array() += bias.value()[static_cast<std::size_t>(i)];
    }
  }
  std::vector<Var<T>> inputs{x, offset, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(
      std::move(out), std::move(inputs), [cols = std::move(cols), g, c, h, w, k, o, oh, ow](Node<T>& n) {
        const int taps = k * k, p = oh * ow, ck = c * taps;
        ConstMapMat<T> G(n.grad.data(), o, p);
        ConstMapMat<T> W(n.inputs[2]->value.data(), o, ck);
        if (auto* gw = n.input_grad(2)) {
          ConstMapMat<T> X(cols.data(), ck, p);
          MapMat<T> GW(gw->data(), o, ck);
          GW.noalias() += G * X.transpose();
        }
        if (n.inputs.size() > 3) {
          if (auto* gb = n.input_grad(3)) {
            for (int i = 0; i < o; ++i) (*gb)[static_cast<std::size_t>(i)] += G.row(i).sum();
          }
        }
        auto* gx = n.input_grad(0);
        auto* goff = n.input_grad(1);
        if (!gx && !goff) return;
        MatrixRM<T> dcols = W.transpose() * G;
        const T* off = n.inputs[1]->value.data();
        for (int ch = 0; ch < c; ++ch) {
          const T* plane = n.inputs[0]->value.data() + static_cast<std::size_t>(ch) * h * w;
          T* gplane = gx ? gx->data() + static_cast<std::size_t>(ch) * h * w : nullptr;
          for (int t = 0; t < taps; ++t) {
            const int ky = t / k, kx = t % k;
            const T* offy = off + static_cast<std::size_t>(2 * t) * p;
            const T* offx = off + static_cast<std::size_t>(2 * t + 1) * p;
            const T* dc = dcols.data() + static_cast<std::size_t>(ch * taps + t) * p;
            for (int oy = 0; oy < oh; ++oy) {
              for (int ox = 0; ox < ow; ++ox) {
                const int q = oy * ow + ox;
                const T sy = static_cast<T>(oy * g.stride - g.pad_begin + ky * g.dilation) + offy[q];
                const T sx = static_cast<T>(ox * g.stride - g.pad_begin + kx * g.dilation) + offx[q];
                T dy = 0, dx = 0;
                detail::bilinear_zero_backward(plane, gplane, h, w, sy, sx, dc[q], goff ? &dy : nullptr,
                                               goff ? &dx : nullptr);
                if (goff) {
                  (*goff)[static_cast<std::size_t>(2 * t) * p + q] += dc[q] * dy;
                  (*goff)[static_cast<std::size_t>(2 * t + 1) * p + q] += dc[q] * dx;
                }
              }
            }
          }
        }
      });
}

// Region of interest in feature-grid coordinates (cell centres at integers).
struct FeatureRoi {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
};

// Deformable RoI-align pooling to a bins x bins grid. Each bin averages
// samples x samples bilinear reads. `offsets` (2 x bins x bins, channel 0 = y,
// channel 1 = x) are normalised shifts scaled by gamma * RoI size; when
// undefined the op is plain aligned pooling.
template <typename T>
Var<T> deform_roi_pool(const Var<T>& feat, const FeatureRoi& roi, const Var<T>& offsets, int bins,
                       int samples = 2, T gamma = T(0.1)) {
  const int c = feat.dim(0), h = feat.dim(1), w = feat.dim(2);
  SIAMATTN_CHECK(roi.width() > 0 && roi.height() > 0, ErrorCode::kInvalidArgument,
                 "deform_roi_pool: degenerate region");
  const bool has_off = offsets.defined();
  if (has_off) {
    SIAMATTN_CHECK(offsets.value().rank() == 3 && offsets.dim(0) == 2 && offsets.dim(1) == bins &&
                       offsets.dim(2) == bins,
                   ErrorCode::kShapeMismatch, "deform_roi_pool offsets must be 2 x bins x bins");
  }
  const T rw = static_cast<T>(roi.width()), rh = static_cast<T>(roi.height());
  const T bw = rw / bins, bh = rh / bins;
  const T inv = T(1) / static_cast<T>(samples * samples);
  // Sample positions per bin, shared across channels.
  std::vector<std::array<T, 2>> pos(static_cast<std::size_t>(bins) * bins * samples * samples);
  auto fill_positions = [&](const T* off) {
    std::size_t idx = 0;
    for (int i = 0; i < bins; ++i) {
      for (int j = 0; j < bins; ++j) {
        T shift_y = 0, shift_x = 0;
        if (off) {
          shift_y = gamma * rh * off[i * bins + j];
          shift_x = gamma * rw * off[bins * bins + i * bins + j];
        }
        for (int sy = 0; sy < samples; ++sy) {
          for (int sx = 0; sx < samples; ++sx) {
            pos[idx++] = {static_cast<T>(roi.y1) + i * bh + (sy + T(0.5)) * bh / samples + shift_y,
                          static_cast<T>(roi.x1) + j * bw + (sx + T(0.5)) * bw / samples + shift_x};
          }
        }
      }
    }
  };
  fill_positions(has_off ? offsets.value().data() : nullptr);
  Tensor<T> out(Shape{c, bins, bins});
  const int per_bin = samples * samples;
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = feat.value().data() + static_cast<std::size_t>(ch) * h * w;
    for (int b = 0; b < bins * bins; ++b) {
      T acc = 0;
      for (int s = 0; s < per_bin; ++s) {
        const auto& p = pos[static_cast<std::size_t>(b) * per_bin + s];
        acc += detail::bilinear_zero(plane, h, w, p[0], p[1]);
      }
      out[static_cast<std::size_t>(ch) * bins * bins + b] = acc * inv;
    }
  }
  std::vector<Var<T>> inputs{feat};
  if (has_off) inputs.push_back(offsets);
  return make_result<T>(
      std::move(out), std::move(inputs),
      [pos = std::move(pos), c, h, w, bins, per_bin, inv, gamma, rw, rh](Node<T>& n) {
        auto* gf = n.input_grad(0);
        Tensor<T>* goff = n.inputs.size() > 1 ? n.input_grad(1) : nullptr;
        const int nb = bins * bins;
        for (int ch = 0; ch < c; ++ch) {
          const T* plane = n.inputs[0]->value.data() + static_cast<std::size_t>(ch) * h * w;
          T* gplane = gf ? gf->data() + static_cast<std::size_t>(ch) * h * w : nullptr;
          for (int b = 0; b < nb; ++b) {
            const T go = n.grad[static_cast<std::size_t>(ch) * nb + b] * inv;
            for (int s = 0; s < per_bin; ++s) {
              const auto& p = pos[static_cast<std::size_t>(b) * per_bin + s];
              T dy = 0, dx = 0;
              detail::bilinear_zero_backward(plane, gplane, h, w, p[0], p[1], go,
                                             goff ? &dy : nullptr, goff ? &dx : nullptr);
              if (goff) {
                (*goff)[static_cast<std::size_t>(b)] += go * dy * gamma * rh;
                (*goff)[static_cast<std::size_t>(nb + b)] += go * dx * gamma * rw;
              }
            }
          }
        }
      });
}

}  // namespace siamattn
