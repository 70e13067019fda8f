#pragma once

#include <array>
#include <string>
#include <vector>

#include "siamattn/backbone.hpp"
#include "siamattn/deformable.hpp"
#include "siamattn/geometry.hpp"

namespace siamattn {

struct RefinementConfig {
  bool enabled = true;
  int fusion_channels = 256;
  int box_pool = 4;
  int mask_pool = 16;
  int mask_size = 64;
  int mask_branch_size = 64;
  int box_hidden = 512;
  int mask_channels = 256;
  bool deform_pool = true;
  int pool_samples = 2;
  double offset_gamma = 0.1;
  int regions_per_pair = 16;
  double mask_threshold = 0.5;

  void validate() const {
    SIAMATTN_CHECK(fusion_channels > 0 && box_pool > 0 && mask_pool > 0 && box_hidden > 0 && mask_channels > 0,
                   ErrorCode::kConfigInvalid, "refinement sizes must be positive");
    SIAMATTN_CHECK(mask_size % mask_pool == 0, ErrorCode::kConfigInvalid,
                   "refinement.mask_size must be a multiple of refinement.mask_pool");
    SIAMATTN_CHECK(regions_per_pair > 0, ErrorCode::kConfigInvalid, "refinement.regions_per_pair must be > 0");
  }

  bool operator==(const RefinementConfig&) const = default;
};

// Maps feature cell indices to crop pixels: pixel = origin + index * stride.
struct GridFrame {
  double origin = 0;
  double stride = 1;

  double to_feature(double pixel) const { return (pixel - origin) / stride; }
  double to_pixel(double index) const { return origin + index * stride; }
};

// Frame of a backbone map whose cell j covers pixels [s j, s j + s).
inline GridFrame backbone_frame(int stride) { return GridFrame{stride / 2.0, static_cast<double>(stride)}; }

template <typename T>
Var<T> resample_to_frame(const Var<T>& x, const GridFrame& src, const GridFrame& dst, int out_size) {
  const double step = dst.stride / src.stride;
  const double offset = src.to_feature(dst.origin);
  return affine_resample(x, out_size, out_size, step, offset, offset);
}

template <typename T>
struct FusedFeaturePyramid {
  Var<T> box_branch;  // F x R x R
  GridFrame box_frame;
  Var<T> mask_branch;  // F x M x M
  GridFrame mask_frame;
};

template <typename T>
struct RefinedRegion {
  Box region;         // pooled region in crop pixels
  Var<T> box_delta;   // 4 x 1: tx ty tw th relative to `region`
  Var<T> mask_logits; // 1 x mask_size x mask_size over `region`; undefined if not requested
};

template <typename T>
class RegionRefiner {
 public:
  RegionRefiner() = default;

  RegionRefiner(const RefinementConfig& cfg, int attn_channels, int stage1_channels, int stage2_channels,
                ParameterStore<T>& store, Rng& rng)
      : cfg_(cfg) {
    cfg_.validate();
    const auto g = ParamGroup::kHead;
    const int f = cfg_.fusion_channels;
    for (int s = 0; s < 3; ++s) {
      align_[static_cast<std::size_t>(s)] = Conv2d<T>::create(store, "refine.align" + std::to_string(s + 3), g,
                                                              attn_channels, f, 1, {}, rng, false);
    }
    box_proj_ = Conv2d<T>::create(store, "refine.box_proj", g, f, f, 1, {}, rng, false);
    mask_proj_ = Conv2d<T>::create(store, "refine.mask_proj", g, f, f, 1, {}, rng, false);
    low_proj_[0] = Conv2d<T>::create(store, "refine.low_proj1", g, stage1_channels, f, 1, {}, rng, false);
    low_proj_[1] = Conv2d<T>::create(store, "refine.low_proj2", g, stage2_channels, f, 1, {}, rng, false);
    box_offset_ = Conv2d<T>::create(store, "refine.box_pool_offset", g, f, 2, 3, ConvGeometry::same(3), rng,
                                    true, Init::kZero);
    mask_offset_ = Conv2d<T>::create(store, "refine.mask_pool_offset", g, f, 2, 3, ConvGeometry::same(3), rng,
                                     true, Init::kZero);
    const int box_in = f * cfg_.box_pool * cfg_.box_pool;
    box_fc1_ = Linear<T>::create(store, "refine.box_head.fc1", g, box_in, cfg_.box_hidden, rng);
    box_fc2_ = Linear<T>::create(store, "refine.box_head.fc2", g, cfg_.box_hidden, cfg_.box_hidden, rng);
    box_out_ = Linear<T>::create(store, "refine.box_head.out", g, cfg_.box_hidden, 4, rng, Init::kSmall);
    int in = f;
    for (int i = 0; i < 4; ++i) {
      mask_convs_[static_cast<std::size_t>(i)] =
          Conv2d<T>::create(store, "refine.mask_head.conv" + std::to_string(i + 1), g, in, cfg_.mask_channels, 3,
                            ConvGeometry::same(3), rng);
      in = cfg_.mask_channels;
    }
    const int factor = cfg_.mask_size / cfg_.mask_pool;
    mask_deconv_ = ConvTranspose2d<T>::create(store, "refine.mask_head.deconv", g, in, 1, factor, factor, rng,
                                              Init::kSmall);
  }

  const RefinementConfig& config() const { return cfg_; }

  // Correlation maps of the three attentional pairs -> aligned 1x1 projections
  // -> element-wise sum (trunk). The box branch keeps the response grid; the
  // mask branch resamples the trunk onto a mask_branch_size grid over the same
  // pixel extent and adds projected stage-1/2 search features.
  FusedFeaturePyramid<T> build_fused_features(const std::array<Var<T>, 3>& correlations,
                                              const GridFrame& response_frame,
                                              const std::array<FeatureMap<T>, 2>& low_stages) const {
    const int r = correlations[0].dim(1);
    std::vector<Var<T>> aligned;
    for (std::size_t s = 0; s < 3; ++s) {
      SIAMATTN_CHECK(correlations[s].value().rank() == 3, ErrorCode::kShapeMismatch,
                     "correlation maps must be C x H x W");
      aligned.push_back(align_[s](resize_bilinear(correlations[s], r, r)));
    }
    const Var<T> trunk = add_n(aligned);
    FusedFeaturePyramid<T> out;
    out.box_frame = response_frame;
    out.box_branch = box_proj_(trunk);
    const int m = cfg_.mask_branch_size;
    const double extent = r * response_frame.stride;
    const double start = response_frame.origin - response_frame.stride / 2;
    out.mask_frame = GridFrame{start + extent / m / 2, extent / m};
    std::vector<Var<T>> mask_terms{mask_proj_(resample_to_frame(trunk, response_frame, out.mask_frame, m))};
    for (std::size_t s = 0; s < 2; ++s) {
      const auto& fm = low_stages[s];
      mask_terms.push_back(
          low_proj_[s](resample_to_frame(fm.data, backbone_frame(fm.stride), out.mask_frame, m)));
    }
    out.mask_branch = add_n(mask_terms);
    return out;
  }

  // Pools `region` (crop pixels, clipped to [0, crop_size]) from a branch.
  Var<T> pool(const Var<T>& branch, const GridFrame& frame, const Box& region, int bins,
              const Conv2d<T>& offset_predictor, int crop_size) const {
    const Box clipped = clip_box(region, crop_size, crop_size);
    SIAMATTN_CHECK(clipped.w > 0 && clipped.h > 0, ErrorCode::kInvalidArgument,
                   "refinement region is degenerate after clipping");
    const FeatureRoi roi{frame.to_feature(clipped.x1()), frame.to_feature(clipped.y1()),
                         frame.to_feature(clipped.x2()), frame.to_feature(clipped.y2())};
    const T gamma = static_cast<T>(cfg_.offset_gamma);
    const Var<T> plain = deform_roi_pool(branch, roi, Var<T>(), bins, cfg_.pool_samples, gamma);
    if (!cfg_.deform_pool) return plain;
    return deform_roi_pool(branch, roi, offset_predictor(plain), bins, cfg_.pool_samples, gamma);
  }

  Var<T> box_head(const Var<T>& pooled) const {
    return box_out_(relu(box_fc2_(relu(box_fc1_(pooled)))));
  }

  Var<T> mask_head(const Var<T>& pooled) const {
    Var<T> y = pooled;
    for (const auto& c : mask_convs_) y = relu(c(y));
    return mask_deconv_(y);
  }

  // The returned region is `region` clipped to the crop; the delta and the
  // mask are expressed relative to it.
  RefinedRegion<T> refine(const FusedFeaturePyramid<T>& pyr, const Box& region, int crop_size,
                          bool with_mask) const {
    RefinedRegion<T> out;
    out.region = clip_box(region, crop_size, crop_size);
    out.box_delta = box_head(pool(pyr.box_branch, pyr.box_frame, out.region, cfg_.box_pool, box_offset_, crop_size));
    if (with_mask) out.mask_logits = refine_mask(pyr, out.region, crop_size);
    return out;
  }

  Var<T> refine_mask(const FusedFeaturePyramid<T>& pyr, const Box& region, int crop_size) const {
    return mask_head(pool(pyr.mask_branch, pyr.mask_frame, region, cfg_.mask_pool, mask_offset_, crop_size));
  }

  const Linear<T>& box_output_layer() const { return box_out_; }
  const ConvTranspose2d<T>& mask_output_layer() const { return mask_deconv_; }
  const Linear<T>& box_hidden_layer(int i) const { return i == 0 ? box_fc1_ : box_fc2_; }

 private:
  RefinementConfig cfg_;
  std::array<Conv2d<T>, 3> align_;
  Conv2d<T> box_proj_, mask_proj_;
  std::array<Conv2d<T>, 2> low_proj_;
  Conv2d<T> box_offset_, mask_offset_;
  Linear<T> box_fc1_, box_fc2_, box_out_;
  std::array<Conv2d<T>, 4> mask_convs_;
  ConvTranspose2d<T> mask_deconv_;
};

template <typename T>
BoxDelta to_box_delta(const Var<T>& delta) {
  const auto& v = delta.value();
  return BoxDelta{static_cast<double>(v[0]), static_cast<double>(v[1]), static_cast<double>(v[2]),
                  static_cast<double>(v[3])};
}

}  // namespace siamattn
