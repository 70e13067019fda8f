#pragma once

#include <array>
#include <string>
#include <vector>

#include "siamattn/params.hpp"

namespace siamattn {

// Five-stage residual feature extractor.
//
// Spatial arithmetic (side s of a square input):
//   stage 1  7x7 stride-2 stem, padding (3, 2)              -> floor(s / 2)
//   stage 2  first block 3x3 stride 2, padding (1, 0)        -> floor(s / 4)
//   stage 3  first block 3x3 stride 2, padding (1, 0)        -> floor(s / 8)
//   stage 4  dilation 2, same padding                        -> floor(s / 8)
//   stage 5  dilation 4, same padding                        -> floor(s / 8)
// Projection shortcuts of strided blocks are 2x2 stride-2 convolutions, which
// also floor. Hence 127 -> 15, 255 -> 31 and 64 -> 8.
struct BackboneConfig {
  int num_stages = 5;
  std::vector<int> channels_per_stage{64, 256, 512, 1024, 2048};
  std::vector<int> blocks_per_stage{1, 3, 4, 6, 3};
  bool bottleneck = true;
  int final_stride = 8;
  int adjusted_channels = 256;
  bool tiny_mode = false;

  static BackboneConfig paper() { return BackboneConfig{}; }

  static BackboneConfig tiny() {
    BackboneConfig c;
    c.channels_per_stage = {8, 16, 24, 32, 32};
    c.blocks_per_stage = {1, 1, 1, 1, 1};
    c.bottleneck = false;
    c.adjusted_channels = 16;
    c.tiny_mode = true;
    return c;
  }

  void validate() const {
    SIAMATTN_CHECK(num_stages == 5, ErrorCode::kConfigInvalid,
                   "backbone.num_stages must be 5, got " + std::to_string(num_stages));
    SIAMATTN_CHECK(final_stride == 8, ErrorCode::kConfigInvalid,
                   "backbone.final_stride must be 8, got " + std::to_string(final_stride));
    SIAMATTN_CHECK(channels_per_stage.size() == 5 && blocks_per_stage.size() == 5,
                   ErrorCode::kConfigInvalid, "backbone stage lists must have 5 entries");
    for (int c : channels_per_stage)
      SIAMATTN_CHECK(c > 0, ErrorCode::kConfigInvalid, "backbone channels must be positive");
    for (int b : blocks_per_stage)
      SIAMATTN_CHECK(b > 0, ErrorCode::kConfigInvalid, "backbone block counts must be positive");
    SIAMATTN_CHECK(!bottleneck || channels_per_stage[1] % 4 == 0, ErrorCode::kConfigInvalid,
                   "bottleneck widths must be divisible by 4");
    SIAMATTN_CHECK(adjusted_channels > 0 && adjusted_channels % 8 == 0, ErrorCode::kConfigInvalid,
                   "backbone.adjusted_channels must be a positive multiple of 8");
  }

  bool operator==(const BackboneConfig&) const = default;
};

// Spatial side of stages 3-5 for an input of side s.
inline int backbone_output_side(int s) { return ((s / 2) / 2) / 2; }

template <typename T>
struct FeatureMap {
  Var<T> data;  // C x H x W
  int stride = 1;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
};

// stage[0..1] raw (strides 2, 4); stage[2..4] channel-adjusted at stride 8.
template <typename T>
struct StageBundle {
  std::array<FeatureMap<T>, 5> stage;

  const FeatureMap<T>& operator[](int i) const { return stage[static_cast<std::size_t>(i)]; }
};

template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& config, ParameterStore<T>& store, Rng& rng) : config_(config) {
    config_.validate();
    const auto& ch = config_.channels_per_stage;
    const auto g = ParamGroup::kBackbone;
    stem_ = Conv2d<T>::create(store, "backbone.stem", g, 3, ch[0], 7, ConvGeometry{2, 3, 2, 1}, rng);
    int in = ch[0];
    const int strides[5] = {0, 2, 2, 1, 1};
    const int dilations[5] = {0, 1, 1, 2, 4};
    for (int s = 1; s < 5; ++s) {
      for (int b = 0; b < config_.blocks_per_stage[static_cast<std::size_t>(s)]; ++b) {
        const std::string name = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        blocks_[static_cast<std::size_t>(s)].push_back(
            make_block(store, name, in, ch[static_cast<std::size_t>(s)], b == 0 ? strides[s] : 1,
                       dilations[s], rng));
        in = ch[static_cast<std::size_t>(s)];
      }
    }
    for (int s = 2; s < 5; ++s) {
      adjust_[static_cast<std::size_t>(s - 2)] = Conv2d<T>::create(
          store, "backbone.adjust" + std::to_string(s + 1), g, ch[static_cast<std::size_t>(s)],
          config_.adjusted_channels, 1, ConvGeometry{}, rng);
    }
  }

  const BackboneConfig& config() const { return config_; }

  // Validated entry point: square crops of side 127 / 255 (paper mode) or any
  // multiple of the final stride (tiny mode).
  StageBundle<T> extract_features(const Var<T>& crop) const {
    SIAMATTN_CHECK(crop.value().rank() == 3 && crop.dim(0) == 3, ErrorCode::kShapeMismatch,
                   "crop must be 3 x S x S, got " + shape_str(crop.shape()));
    const int h = crop.dim(1), w = crop.dim(2);
    SIAMATTN_CHECK(h == w, ErrorCode::kInvalidArgument,
                   "crop must be square, got " + std::to_string(h) + "x" + std::to_string(w));
    if (config_.tiny_mode) {
      SIAMATTN_CHECK(h >= 2 * config_.final_stride && h % config_.final_stride == 0,
                     ErrorCode::kInvalidArgument,
                     "tiny-mode crop side must be a multiple of 8 and >= 16, got " + std::to_string(h));
    } else {
      SIAMATTN_CHECK(h == 127 || h == 255, ErrorCode::kInvalidArgument,
                     "crop side must be 127 or 255, got " + std::to_string(h));
    }
    return forward(crop);
  }

  // Unchecked forward for any input large enough for the stem.
  StageBundle<T> forward(const Var<T>& crop) const {
    StageBundle<T> out;
    Var<T> x = relu(stem_(crop));
    out.stage[0] = {x, 2};
    const int strides[5] = {2, 4, 8, 8, 8};
    for (std::size_t s = 1; s < 5; ++s) {
      for (const auto& blk : blocks_[s]) x = run_block(blk, x);
      if (s < 2) {
        out.stage[s] = {x, strides[s]};
      } else {
        out.stage[s] = {adjust_[s - 2](x), strides[s]};
      }
    }
    return out;
  }

 private:
  struct Block {
    std::vector<Conv2d<T>> convs;
    Conv2d<T> shortcut;
    bool has_shortcut = false;
  };

  Block make_block(ParameterStore<T>& store, const std::string& name, int in, int out, int stride,
                   int dilation, Rng& rng) {
    const auto g = ParamGroup::kBackbone;
    const ConvGeometry strided{2, 1, 0, 1};
    const ConvGeometry spatial = stride == 2 ? strided : ConvGeometry::same(3, dilation);
    Block b;
    if (config_.bottleneck) {
      const int mid = out / 4;
      b.convs.push_back(Conv2d<T>::create(store, name + ".conv1", g, in, mid, 1, ConvGeometry{}, rng));
      b.convs.push_back(Conv2d<T>::create(store, name + ".conv2", g, mid, mid, 3, spatial, rng));
      b.convs.push_back(Conv2d<T>::create(store, name + ".conv3", g, mid, out, 1, ConvGeometry{}, rng));
    } else {
      b.convs.push_back(Conv2d<T>::create(store, name + ".conv1", g, in, out, 3, spatial, rng));
      b.convs.push_back(
          Conv2d<T>::create(store, name + ".conv2", g, out, out, 3, ConvGeometry::same(3, dilation), rng));
    }
    // Residual branch output starts at half the He scale.
    auto& last = b.convs.back().weight.mutable_value();
    for (auto& v : last.values()) v *= T(0.5);
    if (stride == 2) {
      b.shortcut = Conv2d<T>::create(store, name + ".shortcut", g, in, out, 2, ConvGeometry{2, 0, 0, 1}, rng);
      b.has_shortcut = true;
    } else if (in != out) {
      b.shortcut = Conv2d<T>::create(store, name + ".shortcut", g, in, out, 1, ConvGeometry{}, rng);
      b.has_shortcut = true;
    }
    return b;
  }

  static Var<T> run_block(const Block& b, const Var<T>& x) {
    Var<T> y = x;
    for (std::size_t i = 0; i < b.convs.size(); ++i) {
      y = b.convs[i](y);
      if (i + 1 < b.convs.size()) y = relu(y);
    }
    return relu(add(y, b.has_shortcut ? b.shortcut(x) : x));
  }

  BackboneConfig config_;
  Conv2d<T> stem_;
  std::array<std::vector<Block>, 5> blocks_;
  std::array<Conv2d<T>, 3> adjust_;
};

}  // namespace siamattn
