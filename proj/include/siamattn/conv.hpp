#pragma once

#include <vector>

#include "siamattn/ops.hpp"

namespace siamattn {

// Convolution geometry. Padding may be asymmetric: a 3x3 stride-2 layer with
// pad_begin = 1, pad_end = 0 maps a side s to floor(s / 2).
struct ConvGeometry {
  int stride = 1;
  int pad_begin = 0;
  int pad_end = 0;
  int dilation = 1;

  static ConvGeometry same(int kernel, int dilation = 1) {
    const int p = dilation * (kernel - 1) / 2;
    return ConvGeometry{1, p, p, dilation};
  }

  int output_size(int input, int kernel) const {
    return (input + pad_begin + pad_end - dilation * (kernel - 1) - 1) / stride + 1;
  }
};

namespace detail {

template <typename T>
void im2col(const T* in, int c, int h, int w, int k, const ConvGeometry& g, int oh, int ow,
            T* cols) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch) {
    const T* src = in + static_cast<std::size_t>(ch) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = cols + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad_begin + ky * g.dilation;
          T* row = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + ow, T(0));
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad_begin + kx * g.dilation;
            row[ox] = (ix >= 0 && ix < w) ? src[iy * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int c, int h, int w, int k, const ConvGeometry& g, int oh, int ow,
            T* out) {
  const std::size_t plane = static_cast<std::size_t>(oh) * ow;
  for (int ch = 0; ch < c; ++ch) {
    T* dst = out + static_cast<std::size_t>(ch) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* src = cols + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * g.stride - g.pad_begin + ky * g.dilation;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * g.stride - g.pad_begin + kx * g.dilation;
            if (ix >= 0 && ix < w) dst[iy * w + ix] += src[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution of a C x H x W map with an O x C x k x k weight.
// `bias` may be undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& g) {
  SIAMATTN_CHECK(x.value().rank() == 3 && weight.value().rank() == 4, ErrorCode::kShapeMismatch,
                 "conv2d expects C x H x W input and O x C x k x k weight");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int o = weight.dim(0), k = weight.dim(2);
  SIAMATTN_CHECK(weight.dim(1) == c && weight.dim(3) == k, ErrorCode::kShapeMismatch,
                 "conv2d weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  const int oh = g.output_size(h, k), ow = g.output_size(w, k);
  SIAMATTN_CHECK(oh >= 1 && ow >= 1, ErrorCode::kShapeMismatch,
                 "conv2d input " + shape_str(x.shape()) + " too small for kernel");
  const int ck = c * k * k, p = oh * ow;
  const bool pointwise = k == 1 && g.stride == 1 && g.pad_begin == 0 && g.pad_end == 0;
  Tensor<T> cols;
  if (!pointwise) {
    cols = Tensor<T>(Shape{ck, p});
    detail::im2col(x.value().data(), c, h, w, k, g, oh, ow, cols.data());
  }
  Tensor<T> out(Shape{o, oh, ow});
  {
    ConstMapMat<T> W(weight.value().data(), o, ck);
    ConstMapMat<T> X(pointwise ? x.value().data() : cols.data(), ck, p);
    MapMat<T> Y(out.data(), o, p);
    Y.noalias() = W * X;
    if (bias.defined()) {
      for (int i = 0; i < o; ++i) Y.row(i).array() += bias.value()[static_cast<std::size_t>(i)];
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(
      std::move(out), std::move(inputs),
      [cols = std::move(cols), g, c, h, w, k, o, oh, ow, pointwise](Node<T>& n) {
        const int ck = c * k * k, p = oh * ow;
        ConstMapMat<T> G(n.grad.data(), o, p);
        ConstMapMat<T> W(n.inputs[1]->value.data(), o, ck);
        if (auto* gw = n.input_grad(1)) {
          ConstMapMat<T> X(pointwise ? n.inputs[0]->value.data() : cols.data(), ck, p);
          MapMat<T> GW(gw->data(), o, ck);
          GW.noalias() += G * X.transpose();
        }
        if (n.inputs.size() > 2) {
          if (auto* gb = n.input_grad(2)) {
            for (int i = 0; i < o; ++i) (*gb)[static_cast<std::size_t>(i)] += G.row(i).sum();
          }
        }
        if (auto* gx = n.input_grad(0)) {
          if (pointwise) {
            MapMat<T> GX(gx->data(), ck, p);
            GX.noalias() += W.transpose() * G;
          } else {
            MatrixRM<T> dcols = W.transpose() * G;
            detail::col2im(dcols.data(), c, h, w, k, g, oh, ow, gx->data());
          }
        }
      });
}

// Transposed convolution with kernel k and stride s, no padding:
// output side = (H - 1) * s + k. Weight layout C x O x k x k.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride) {
  SIAMATTN_CHECK(x.value().rank() == 3 && weight.value().rank() == 4, ErrorCode::kShapeMismatch,
                 "conv_transpose2d expects C x H x W input and C x O x k x k weight");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int o = weight.dim(1), k = weight.dim(2);
  SIAMATTN_CHECK(weight.dim(0) == c, ErrorCode::kShapeMismatch,
                 "conv_transpose2d weight " + shape_str(weight.shape()) + " vs " + shape_str(x.shape()));
  const ConvGeometry g{stride, 0, 0, 1};
  const int oh = (h - 1) * stride + k, ow = (w - 1) * stride + k;
  const int ok = o * k * k, p = h * w;
  Tensor<T> out(Shape{o, oh, ow});
  {
    ConstMapMat<T> W(weight.value().data(), c, ok);
    ConstMapMat<T> X(x.value().data(), c, p);
    MatrixRM<T> cols = W.transpose() * X;  // (O k k) x (H W)
    detail::col2im(cols.data(), o, oh, ow, k, g, h, w, out.data());
    if (bias.defined()) {
      for (int i = 0; i < o; ++i) {
        T* plane = out.data() + static_cast<std::size_t>(i) * oh * ow;
        for (int j = 0; j < oh * ow; ++j) plane[j] += bias.value()[static_cast<std::size_t>(i)];
      }
    }
  }
  std::vector<Var<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result<T>(std::move(out), std::move(inputs), [g, c, h, w, k, o, oh, ow](Node<T>& n) {
    const int ok = o * k * k, p = h * w;
    MatrixRM<T> gcols(ok, p);
    detail::im2col(n.grad.data(), o, oh, ow, k, g, h, w, gcols.data());
    ConstMapMat<T> W(n.inputs[1]->value.data(), c, ok);
    ConstMapMat<T> X(n.inputs[0]->value.data(), c, p);
    if (auto* gx = n.input_grad(0)) {
      MapMat<T> GX(gx->data(), c, p);
      GX.noalias() += W * gcols;
    }
    if (auto* gw = n.input_grad(1)) {
      MapMat<T> GW(gw->data(), c, ok);
      GW.noalias() += X * gcols.transpose();
    }
    if (n.inputs.size() > 2) {
      if (auto* gb = n.input_grad(2)) {
        for (int i = 0; i < o; ++i) {
          const T* plane = n.grad.data() + static_cast<std::size_t>(i) * oh * ow;
          T s = 0;
          for (int j = 0; j < oh * ow; ++j) s += plane[j];
          (*gb)[static_cast<std::size_t>(i)] += s;
        }
      }
    }
  });
}

// Per-channel valid cross-correlation: out[c] = search[c] (*) kernel[c].
template <typename T>
Var<T> depthwise_xcorr(const Var<T>& search, const Var<T>& kernel) {
  SIAMATTN_CHECK(search.value().rank() == 3 && kernel.value().rank() == 3, ErrorCode::kShapeMismatch,
                 "depthwise_xcorr expects rank-3 maps");
  const int c = search.dim(0), hs = search.dim(1), ws = search.dim(2);
  const int hk = kernel.dim(1), wk = kernel.dim(2);
  SIAMATTN_CHECK(kernel.dim(0) == c, ErrorCode::kShapeMismatch,
                 "depthwise_xcorr channel mismatch " + shape_str(search.shape()) + " vs " +
                     shape_str(kernel.shape()));
  SIAMATTN_CHECK(hk <= hs && wk <= ws, ErrorCode::kShapeMismatch,
                 "depthwise_xcorr kernel " + shape_str(kernel.shape()) + " larger than search " +
                     shape_str(search.shape()));
  const int oh = hs - hk + 1, ow = ws - wk + 1;
  Tensor<T> out(Shape{c, oh, ow});
  const auto& sv = search.value();
  const auto& kv = kernel.value();
  for (int ch = 0; ch < c; ++ch) {
    const T* s = sv.data() + static_cast<std::size_t>(ch) * hs * ws;
    const T* kp = kv.data() + static_cast<std::size_t>(ch) * hk * wk;
    T* op = out.data() + static_cast<std::size_t>(ch) * oh * ow;
    for (int i = 0; i < hk; ++i) {
      for (int j = 0; j < wk; ++j) {
        const T kval = kp[i * wk + j];
        for (int y = 0; y < oh; ++y) {
          const T* srow = s + (y + i) * ws + j;
          T* orow = op + y * ow;
          for (int x = 0; x < ow; ++x) orow[x] += kval * srow[x];
        }
      }
    }
  }
  return make_result<T>(std::move(out), {search, kernel}, [c, hs, ws, hk, wk, oh, ow](Node<T>& n) {
    const auto& sv = n.inputs[0]->value;
    const auto& kv = n.inputs[1]->value;
    auto* gs = n.input_grad(0);
    auto* gk = n.input_grad(1);
    for (int ch = 0; ch < c; ++ch) {
      const T* s = sv.data() + static_cast<std::size_t>(ch) * hs * ws;
      const T* kp = kv.data() + static_cast<std::size_t>(ch) * hk * wk;
      const T* go = n.grad.data() + static_cast<std::size_t>(ch) * oh * ow;
      for (int i = 0; i < hk; ++i) {
        for (int j = 0; j < wk; ++j) {
          T acc = 0;
          const T kval = kp[i * wk + j];
          for (int y = 0; y < oh; ++y) {
            const T* srow = s + (y + i) * ws + j;
            const T* grow = go + y * ow;
            if (gs) {
              T* gsrow = gs->data() + static_cast<std::size_t>(ch) * hs * ws + (y + i) * ws + j;
              for (int x = 0; x < ow; ++x) gsrow[x] += kval * grow[x];
            }
            for (int x = 0; x < ow; ++x) acc += srow[x] * grow[x];
          }
          if (gk) gk->data()[static_cast<std::size_t>(ch) * hk * wk + i * wk + j] += acc;
        }
      }
    }
  });
}

}  // namespace siamattn
