#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "siamattn/autograd.hpp"

namespace siamattn {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<MatrixRM<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const MatrixRM<T>>;

template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  SIAMATTN_CHECK(a == b, ErrorCode::kShapeMismatch,
                 std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Bilinear read with zero contribution from neighbours outside the grid.
template <typename T>
T bilinear_zero(const T* plane, int h, int w, T y, T x) {
  if (y <= T(-1) || y >= T(h) || x <= T(-1) || x >= T(w)) return T(0);
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const T ly = y - y0, lx = x - x0;
  T v = 0;
  auto px = [&](int yy, int xx) -> T {
    return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? plane[yy * w + xx] : T(0);
  };
  v += (1 - ly) * (1 - lx) * px(y0, x0);
  v += (1 - ly) * lx * px(y0, x0 + 1);
  v += ly * (1 - lx) * px(y0 + 1, x0);
  v += ly * lx * px(y0 + 1, x0 + 1);
  return v;
}

// Scatters `g` back through bilinear_zero onto the plane; also returns the
// derivatives of the sampled value w.r.t. y and x.
template <typename T>
void bilinear_zero_backward(const T* plane, T* grad_plane, int h, int w, T y, T x, T g, T* dy,
                            T* dx) {
  if (dy) *dy = 0;
  if (dx) *dx = 0;
  if (y <= T(-1) || y >= T(h) || x <= T(-1) || x >= T(w)) return;
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const T ly = y - y0, lx = x - x0;
  const int ys[2] = {y0, y0 + 1};
  const int xs[2] = {x0, x0 + 1};
  const T wy[2] = {1 - ly, ly};
  const T wx[2] = {1 - lx, lx};
  const T sy[2] = {-1, 1};
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      const int yy = ys[a], xx = xs[b];
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const std::size_t idx = static_cast<std::size_t>(yy) * w + xx;
      if (grad_plane) grad_plane[idx] += g * wy[a] * wx[b];
      if (dy) *dy += sy[a] * wx[b] * plane[idx];
      if (dx) *dx += wy[a] * sy[b] * plane[idx];
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (auto* g = n.input_grad(i)) *g += n.grad;
    }
  });
}

template <typename T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  SIAMATTN_CHECK(!xs.empty(), ErrorCode::kInvalidArgument, "add_n of empty list");
  Tensor<T> out = xs[0].value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    detail::require_same_shape(xs[0].shape(), xs[i].shape(), "add_n");
    out += xs[i].value();
  }
  return make_result<T>(std::move(out), xs, [](Node<T>& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      if (auto* g = n.input_grad(i)) *g += n.grad;
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    if (auto* g = n.input_grad(0)) *g += n.grad;
    if (auto* g = n.input_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (auto* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    }
    if (auto* g = n.input_grad(1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= c;
  return make_result<T>(std::move(out), {a}, [c](Node<T>& n) {
    if (auto* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += c * n.grad[i];
    }
  });
}

// a * s where s is a learnable one-element variable.
template <typename T>
Var<T> mul_scalar(const Var<T>& a, const Var<T>& s) {
  SIAMATTN_CHECK(s.value().size() == 1, ErrorCode::kShapeMismatch, "mul_scalar expects a scalar");
  const T sv = s.value()[0];
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= sv;
  return make_result<T>(std::move(out), {a, s}, [](Node<T>& n) {
    const T sv = n.inputs[1]->value[0];
    if (auto* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += sv * n.grad[i];
    }
    if (auto* g = n.input_grad(1)) {
      const auto& av = n.inputs[0]->value;
      T acc = 0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * n.grad[i];
      (*g)[0] += acc;
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (n.value[i] > T(0)) (*g)[i] += n.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = T(1) / (T(1) + std::exp(-v));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const T s = n.value[i];
        (*g)[i] += n.grad[i] * s * (1 - s);
      }
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), {a}, [](Node<T>& n) {
    if (auto* g = n.input_grad(0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    }
  });
}

// Matrix product of rank-2 operands, optionally transposing either side.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
  SIAMATTN_CHECK(a.value().rank() == 2 && b.value().rank() == 2, ErrorCode::kShapeMismatch,
                 "matmul expects rank-2 operands");
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const int k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  SIAMATTN_CHECK(k == k2, ErrorCode::kShapeMismatch,
                 "matmul inner dims differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  Tensor<T> out(Shape{m, n});
  ConstMapMat<T> A(a.value().data(), ar, ac), B(b.value().data(), br, bc);
  MapMat<T> C(out.data(), m, n);
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
  return make_result<T>(std::move(out), {a, b}, [trans_a, trans_b](Node<T>& nd) {
    const auto& av = nd.inputs[0]->value;
    const auto& bv = nd.inputs[1]->value;
    ConstMapMat<T> A(av.data(), av.dim(0), av.dim(1)), B(bv.data(), bv.dim(0), bv.dim(1));
    ConstMapMat<T> G(nd.grad.data(), nd.grad.dim(0), nd.grad.dim(1));
    if (auto* g = nd.input_grad(0)) {
      MapMat<T> GA(g->data(), av.dim(0), av.dim(1));
      // op(A) = G op(B)^T ; if trans_a, A = (G op(B)^T)^T
      if (!trans_a) {
        if (!trans_b) GA.noalias() += G * B.transpose();
        else GA.noalias() += G * B;
      } else {
        if (!trans_b) GA.noalias() += B * G.transpose();
        else GA.noalias() += B.transpose() * G.transpose();
      }
    }
    if (auto* g = nd.input_grad(1)) {
      MapMat<T> GB(g->data(), bv.dim(0), bv.dim(1));
      if (!trans_b) {
        if (!trans_a) GB.noalias() += A.transpose() * G;
        else GB.noalias() += A * G;
      } else {
        if (!trans_a) GB.noalias() += G.transpose() * A;
        else GB.noalias() += G.transpose() * A.transpose();
      }
    }
  });
}

enum class SoftmaxAxis {
  kColumn,  // normalise down each column: every column sums to one
  kRow,     // normalise along each row: every row sums to one
};

template <typename T>
Var<T> softmax(const Var<T>& a, SoftmaxAxis axis) {
  SIAMATTN_CHECK(a.value().rank() == 2, ErrorCode::kShapeMismatch, "softmax expects rank 2");
  const int rows = a.dim(0), cols = a.dim(1);
  Tensor<T> out = a.value();
  MapMat<T> M(out.data(), rows, cols);
  if (axis == SoftmaxAxis::kRow) {
    for (int r = 0; r < rows; ++r) {
      auto row = M.row(r);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
  } else {
    for (int c = 0; c < cols; ++c) {
      auto col = M.col(c);
      col.array() = (col.array() - col.maxCoeff()).exp();
      col /= col.sum();
    }
  }
  return make_result<T>(std::move(out), {a}, [axis, rows, cols](Node<T>& n) {
    auto* g = n.input_grad(0);
    if (!g) return;
    ConstMapMat<T> S(n.value.data(), rows, cols);
    ConstMapMat<T> G(n.grad.data(), rows, cols);
    MapMat<T> GI(g->data(), rows, cols);
    if (axis == SoftmaxAxis::kRow) {
      for (int r = 0; r < rows; ++r) {
        const T dot = S.row(r).dot(G.row(r));
        GI.row(r).array() += S.row(r).array() * (G.row(r).array() - dot);
      }
    } else {
      for (int c = 0; c < cols; ++c) {
        const T dot = S.col(c).dot(G.col(c));
        GI.col(c).array() += S.col(c).array() * (G.col(c).array() - dot);
      }
    }
  });
}

// Softmax over all elements of a vector-like variable.
template <typename T>
Var<T> softmax_all(const Var<T>& a) {
  return reshape(softmax(reshape(a, Shape{1, static_cast<int>(a.value().size())}), SoftmaxAxis::kRow),
                 a.shape());
}

template <typename T>
Var<T> select(const Var<T>& a, int index) {
  Tensor<T> out = Tensor<T>::scalar(a.value()[static_cast<std::size_t>(index)]);
  return make_result<T>(std::move(out), {a}, [index](Node<T>& n) {
    if (auto* g = n.input_grad(0)) (*g)[static_cast<std::size_t>(index)] += n.grad[0];
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  return make_result<T>(Tensor<T>::scalar(a.value().sum()), {a}, [](Node<T>& n) {
    if (auto* g = n.input_grad(0)) {
      for (auto& v : g->values()) v += n.grad[0];
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T inv = T(1) / static_cast<T>(std::max<std::size_t>(1, a.value().size()));
  return scale(sum(a), inv);
}

// Centre crop of a C x H x W map to C x size x size.
template <typename T>
Var<T> center_crop(const Var<T>& a, int size) {
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  SIAMATTN_CHECK(size >= 1 && size <= h && size <= w, ErrorCode::kShapeMismatch,
                 "center_crop size " + std::to_string(size) + " exceeds " + shape_str(a.shape()));
  const int oy = (h - size) / 2, ox = (w - size) / 2;
  Tensor<T> out(Shape{c, size, size});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(ch, y, x) = a.value().at(ch, y + oy, x + ox);
  return make_result<T>(std::move(out), {a}, [oy, ox, size](Node<T>& n) {
    auto* g = n.input_grad(0);
    if (!g) return;
    const int c = n.value.dim(0);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) g->at(ch, y + oy, x + ox) += n.grad.at(ch, y, x);
  });
}

// Axis-aligned affine resampling of a C x H x W map with bilinear weights and
// edge clamping: output cell (i, j) reads source coordinate
// (offset_y + i * step, offset_x + j * step), cell centres at integers.
template <typename T>
Var<T> affine_resample(const Var<T>& a, int out_h, int out_w, double step, double offset_y,
                       double offset_x) {
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  struct Tap {
    int y0, y1, x0, x1;
    T wy, wx;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(out_h) * out_w);
  for (int i = 0; i < out_h; ++i) {
    for (int j = 0; j < out_w; ++j) {
      double sy = std::clamp(offset_y + i * step, 0.0, static_cast<double>(h - 1));
      double sx = std::clamp(offset_x + j * step, 0.0, static_cast<double>(w - 1));
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      taps[static_cast<std::size_t>(i) * out_w + j] =
          Tap{y0, std::min(y0 + 1, h - 1), x0, std::min(x0 + 1, w - 1), static_cast<T>(sy - y0),
              static_cast<T>(sx - x0)};
    }
  }
  Tensor<T> out(Shape{c, out_h, out_w});
  const auto& in = a.value();
  for (int ch = 0; ch < c; ++ch) {
    const T* p = in.data() + static_cast<std::size_t>(ch) * h * w;
    T* o = out.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (std::size_t k = 0; k < taps.size(); ++k) {
      const Tap& t = taps[k];
      o[k] = (1 - t.wy) * ((1 - t.wx) * p[t.y0 * w + t.x0] + t.wx * p[t.y0 * w + t.x1]) +
             t.wy * ((1 - t.wx) * p[t.y1 * w + t.x0] + t.wx * p[t.y1 * w + t.x1]);
    }
  }
  return make_result<T>(std::move(out), {a}, [taps = std::move(taps), c, h, w](Node<T>& n) {
    auto* g = n.input_grad(0);
    if (!g) return;
    const std::size_t plane = taps.size();
    for (int ch = 0; ch < c; ++ch) {
      T* gp = g->data() + static_cast<std::size_t>(ch) * h * w;
      const T* go = n.grad.data() + ch * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        const Tap& t = taps[k];
        gp[t.y0 * w + t.x0] += go[k] * (1 - t.wy) * (1 - t.wx);
        gp[t.y0 * w + t.x1] += go[k] * (1 - t.wy) * t.wx;
        gp[t.y1 * w + t.x0] += go[k] * t.wy * (1 - t.wx);
        gp[t.y1 * w + t.x1] += go[k] * t.wy * t.wx;
      }
    }
  });
}

// Half-pixel bilinear resize of a square-celled map to out_h x out_w.
template <typename T>
Var<T> resize_bilinear(const Var<T>& a, int out_h, int out_w) {
  const int h = a.dim(1);
  if (out_h == h && out_w == a.dim(2)) return a;
  const double step = static_cast<double>(h) / out_h;
  const double off = 0.5 * step - 0.5;
  return affine_resample(a, out_h, out_w, step, off, off);
}

}  // namespace siamattn
