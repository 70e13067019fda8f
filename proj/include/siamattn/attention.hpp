#pragma once

#include <string>
#include <utility>
#include <vector>

#include "siamattn/deformable.hpp"
#include "siamattn/params.hpp"

namespace siamattn {

struct AttentionConfig {
  bool spatial_sa = true;
  bool channel_sa = true;
  bool cross_attn = true;
  bool deform_conv = true;  // false: the 3x3 layer is a regular convolution
  bool deform_after_sum = true;  // false: the 3x3 layer precedes the attention sums
  SoftmaxAxis channel_softmax = SoftmaxAxis::kRow;

  // With every attention branch off the module is absent altogether.
  bool enabled() const { return spatial_sa || channel_sa || cross_attn; }

  bool operator==(const AttentionConfig&) const = default;
};

// 1x1 projections for spatial self-attention: C -> C/8 for query and key, C -> C for value.
template <typename T>
struct ProjectionSet {
  Conv2d<T> query;
  Conv2d<T> key;
  Conv2d<T> value;

  static ProjectionSet create(ParameterStore<T>& store, const std::string& name, int channels, Rng& rng) {
    SIAMATTN_CHECK(channels % 8 == 0, ErrorCode::kInvalidArgument,
                   "attention channels must be divisible by 8, got " + std::to_string(channels));
    const int reduced = channels / 8;
    ProjectionSet p;
    p.query = Conv2d<T>::create(store, name + ".query", ParamGroup::kHead, channels, reduced, 1, {}, rng);
    p.key = Conv2d<T>::create(store, name + ".key", ParamGroup::kHead, channels, reduced, 1, {}, rng);
    p.value = Conv2d<T>::create(store, name + ".value", ParamGroup::kHead, channels, channels, 1, {}, rng);
    return p;
  }
};

// 3x3 deformable convolution whose offsets come from a parallel plain 3x3
// convolution (18 channels, zero-initialised).
template <typename T>
struct DeformConv3x3 {
  Conv2d<T> offset_branch;
  Var<T> weight;
  Var<T> bias;

  static DeformConv3x3 create(ParameterStore<T>& store, const std::string& name, int channels, Rng& rng) {
    DeformConv3x3 d;
    d.offset_branch = Conv2d<T>::create(store, name + ".offset", ParamGroup::kHead, channels, 18, 3,
                                        ConvGeometry::same(3), rng, true, Init::kZero);
    d.weight = store.create(name + ".weight", ParamGroup::kHead,
                            init_tensor<T>(Shape{channels, channels, 3, 3}, channels * 9, Init::kHe, rng));
    d.bias = store.create(name + ".bias", ParamGroup::kHead, Tensor<T>(Shape{channels}));
    return d;
  }

  Var<T> operator()(const Var<T>& x, bool deformable) const {
    if (!deformable) return conv2d(x, weight, bias, ConvGeometry::same(3));
    return deform_conv2d(x, offset_branch(x), weight, bias, ConvGeometry::same(3));
  }
};

// Per-branch learnable state of one DSA block.
template <typename T>
struct AttentionParams {
  ProjectionSet<T> projection;
  Var<T> alpha;  // spatial self-attention weight
  Var<T> beta;   // channel self-attention weight
  Var<T> gamma;  // cross-attention weight
  DeformConv3x3<T> deform;

  static AttentionParams create(ParameterStore<T>& store, const std::string& name, int channels, Rng& rng) {
    AttentionParams p;
    p.projection = ProjectionSet<T>::create(store, name + ".proj", channels, rng);
    p.alpha = store.create(name + ".alpha", ParamGroup::kHead, Tensor<T>(Shape{1}));
    p.beta = store.create(name + ".beta", ParamGroup::kHead, Tensor<T>(Shape{1}));
    p.gamma = store.create(name + ".gamma", ParamGroup::kHead, Tensor<T>(Shape{1}));
    p.deform = DeformConv3x3<T>::create(store, name + ".deform", channels, rng);
    return p;
  }
};

// Attention maps captured during a forward pass (values only).
template <typename T>
struct AttentionTrace {
  Tensor<T> spatial;  // N x N, column-normalised
  Tensor<T> channel;  // C x C
  Tensor<T> cross;    // C x C, row-normalised, computed from the other branch
};

namespace detail {
template <typename T>
Var<T> flatten_spatial(const Var<T>& x) {
  return reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2)});
}
}  // namespace detail

// out = reshape(alpha * V A + X), A = softmax_col(Q^T K).
template <typename T>
Var<T> spatial_self_attention(const Var<T>& x, const ProjectionSet<T>& proj, const Var<T>& alpha,
                              Tensor<T>* attention = nullptr) {
  SIAMATTN_CHECK(x.value().rank() == 3, ErrorCode::kShapeMismatch, "attention input must be C x H x W");
  SIAMATTN_CHECK(x.dim(0) % 8 == 0, ErrorCode::kInvalidArgument,
                 "spatial attention needs channels divisible by 8, got " + std::to_string(x.dim(0)));
  const Var<T> q = detail::flatten_spatial(proj.query(x));
  const Var<T> k = detail::flatten_spatial(proj.key(x));
  const Var<T> v = detail::flatten_spatial(proj.value(x));
  const Var<T> a = softmax(matmul(q, k, true, false), SoftmaxAxis::kColumn);
  if (attention) *attention = a.value();
  const Var<T> out = add(mul_scalar(matmul(v, a), alpha), detail::flatten_spatial(x));
  return reshape(out, x.shape());
}

// out = reshape(beta * A X + X), A = softmax(X X^T) along `axis`.
template <typename T>
Var<T> channel_self_attention(const Var<T>& x, const Var<T>& beta, SoftmaxAxis axis = SoftmaxAxis::kRow,
                              Tensor<T>* attention = nullptr) {
  SIAMATTN_CHECK(x.value().rank() == 3, ErrorCode::kShapeMismatch, "attention input must be C x H x W");
  const Var<T> xf = detail::flatten_spatial(x);
  const Var<T> a = softmax(matmul(xf, xf, false, true), axis);
  if (attention) *attention = a.value();
  return reshape(add(mul_scalar(matmul(a, xf), beta), xf), x.shape());
}

// Channel cross-attention between the branches. The search output uses the
// template Gram softmax_row(Z Z^T); the template output uses softmax_row(X X^T).
template <typename T>
std::pair<Var<T>, Var<T>> cross_attention(const Var<T>& z, const Var<T>& x, const Var<T>& gamma_z,
                                          const Var<T>& gamma_x, Tensor<T>* attention_z = nullptr,
                                          Tensor<T>* attention_x = nullptr) {
  SIAMATTN_CHECK(z.value().rank() == 3 && x.value().rank() == 3, ErrorCode::kShapeMismatch,
                 "cross attention inputs must be C x H x W");
  SIAMATTN_CHECK(z.dim(0) == x.dim(0), ErrorCode::kShapeMismatch,
                 "cross attention channel mismatch: " + shape_str(z.shape()) + " vs " + shape_str(x.shape()));
  const Var<T> zf = detail::flatten_spatial(z);
  const Var<T> xf = detail::flatten_spatial(x);
  const Var<T> a_from_z = softmax(matmul(zf, zf, false, true), SoftmaxAxis::kRow);
  const Var<T> a_from_x = softmax(matmul(xf, xf, false, true), SoftmaxAxis::kRow);
  if (attention_x) *attention_x = a_from_z.value();
  if (attention_z) *attention_z = a_from_x.value();
  Var<T> x_out = reshape(add(mul_scalar(matmul(a_from_z, xf), gamma_x), xf), x.shape());
  Var<T> z_out = reshape(add(mul_scalar(matmul(a_from_x, zf), gamma_z), zf), z.shape());
  return {z_out, x_out};
}

template <typename T>
struct DsaTrace {
  AttentionTrace<T> z;
  AttentionTrace<T> x;
};

// One DSA block: separate parameters for the template and search branches.
template <typename T>
class DsaBlock {
 public:
  DsaBlock() = default;
  DsaBlock(ParameterStore<T>& store, const std::string& name, int channels, Rng& rng) {
    z_ = AttentionParams<T>::create(store, name + ".z", channels, rng);
    x_ = AttentionParams<T>::create(store, name + ".x", channels, rng);
  }

  const AttentionParams<T>& template_params() const { return z_; }
  const AttentionParams<T>& search_params() const { return x_; }

  std::pair<Var<T>, Var<T>> operator()(const Var<T>& z_in, const Var<T>& x_in, const AttentionConfig& cfg,
                                       DsaTrace<T>* trace = nullptr) const {
    if (!cfg.enabled()) return {z_in, x_in};
    Var<T> z = z_in, x = x_in;
    if (!cfg.deform_after_sum) {
      z = z_.deform(z, cfg.deform_conv);
      x = x_.deform(x, cfg.deform_conv);
    }
    std::vector<Var<T>> zt, xt;
    if (cfg.spatial_sa) {
      zt.push_back(spatial_self_attention(z, z_.projection, z_.alpha, trace ? &trace->z.spatial : nullptr));
      xt.push_back(spatial_self_attention(x, x_.projection, x_.alpha, trace ? &trace->x.spatial : nullptr));
    }
    if (cfg.channel_sa) {
      zt.push_back(channel_self_attention(z, z_.beta, cfg.channel_softmax, trace ? &trace->z.channel : nullptr));
      xt.push_back(channel_self_attention(x, x_.beta, cfg.channel_softmax, trace ? &trace->x.channel : nullptr));
    }
    if (cfg.cross_attn) {
      auto [zc, xc] = cross_attention(z, x, z_.gamma, x_.gamma, trace ? &trace->z.cross : nullptr,
                                      trace ? &trace->x.cross : nullptr);
      zt.push_back(zc);
      xt.push_back(xc);
    }
    Var<T> z_out = add_n(zt);
    Var<T> x_out = add_n(xt);
    if (cfg.deform_after_sum) {
      z_out = z_.deform(z_out, cfg.deform_conv);
      x_out = x_.deform(x_out, cfg.deform_conv);
    }
    return {z_out, x_out};
  }

 private:
  AttentionParams<T> z_;
  AttentionParams<T> x_;
};

}  // namespace siamattn
