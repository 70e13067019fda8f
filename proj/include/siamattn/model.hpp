#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "siamattn/attention.hpp"
#include "siamattn/backbone.hpp"
#include "siamattn/refinement.hpp"
#include "siamattn/rpn.hpp"

namespace siamattn {

struct ModelConfig {
  BackboneConfig backbone;
  AttentionConfig attention;
  AnchorConfig anchors;
  RefinementConfig refinement;
  int exemplar_size = 127;
  int search_size = 255;
  int template_crop = 7;

  static ModelConfig paper() { return ModelConfig{}; }

  static ModelConfig tiny() {
    ModelConfig c;
    c.backbone = BackboneConfig::tiny();
    c.anchors.base_scale = 4;
    c.refinement.fusion_channels = 16;
    c.refinement.box_hidden = 64;
    c.refinement.mask_channels = 16;
    c.refinement.regions_per_pair = 4;
    c.exemplar_size = 64;
    c.search_size = 128;
    c.template_crop = 4;
    return c;
  }

  int template_side() const { return backbone_output_side(exemplar_size); }
  int search_side() const { return backbone_output_side(search_size); }
  int response_size() const { return search_side() - template_crop + 1; }
  int anchors_per_cell() const { return static_cast<int>(anchors.ratios.size()); }

  void validate() const {
    backbone.validate();
    refinement.validate();
    SIAMATTN_CHECK(anchors.stride == backbone.final_stride, ErrorCode::kConfigInvalid,
                   "rpn.stride must equal backbone.final_stride");
    SIAMATTN_CHECK(template_crop >= 1 && template_crop <= template_side(), ErrorCode::kConfigInvalid,
                   "model.template_crop must lie in [1, " + std::to_string(template_side()) + "]");
    SIAMATTN_CHECK(response_size() >= 1, ErrorCode::kConfigInvalid, "search crop too small for the template");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Backbone features of an exemplar crop (stages 3-5, before attention).
template <typename T>
struct TemplateFeatures {
  std::array<Var<T>, 3> stages;
};

template <typename T>
struct ModelOutput {
  std::array<RpnOutput<T>, 3> per_stage;
  RpnOutput<T> fused;
  std::array<Var<T>, 3> z_attn;
  std::array<Var<T>, 3> x_attn;
  FusedFeaturePyramid<T> pyramid;  // empty when refinement is disabled
  std::array<DsaTrace<T>, 3> traces;
};

template <typename T>
class SiamAttnModel {
 public:
  explicit SiamAttnModel(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    backbone_ = std::make_unique<Backbone<T>>(cfg_.backbone, store_, rng);
    const int c = cfg_.backbone.adjusted_channels;
    const int k = cfg_.anchors_per_cell();
    for (int s = 0; s < 3; ++s) {
      const std::string tag = std::to_string(s + 3);
      dsa_[static_cast<std::size_t>(s)] = DsaBlock<T>(store_, "dsa.stage" + tag, c, rng);
      rpn_[static_cast<std::size_t>(s)] = RpnBlock<T>(store_, "rpn.stage" + tag, c, k, rng);
    }
    cls_fusion_ = store_.create("rpn.fusion.cls", ParamGroup::kHead, Tensor<T>(Shape{3}));
    reg_fusion_ = store_.create("rpn.fusion.reg", ParamGroup::kHead, Tensor<T>(Shape{3}));
    const auto& ch = cfg_.backbone.channels_per_stage;
    refiner_ = RegionRefiner<T>(cfg_.refinement, c, ch[0], ch[1], store_, rng);
    anchors_ = make_anchors(cfg_.anchors, cfg_.response_size(), cfg_.search_size);
  }

  SiamAttnModel(const SiamAttnModel&) = delete;
  SiamAttnModel& operator=(const SiamAttnModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const Backbone<T>& backbone() const { return *backbone_; }
  const DsaBlock<T>& dsa(int stage) const { return dsa_[static_cast<std::size_t>(stage)]; }
  const RpnBlock<T>& rpn(int stage) const { return rpn_[static_cast<std::size_t>(stage)]; }
  const RegionRefiner<T>& refiner() const { return refiner_; }
  const AnchorSet& anchors() const { return anchors_; }
  const Var<T>& cls_fusion_logits() const { return cls_fusion_; }
  const Var<T>& reg_fusion_logits() const { return reg_fusion_; }

  GridFrame response_frame() const { return GridFrame{anchors_.origin, static_cast<double>(anchors_.stride)}; }

  TemplateFeatures<T> encode_template(const Var<T>& exemplar) const {
    SIAMATTN_CHECK(exemplar.dim(1) == cfg_.exemplar_size, ErrorCode::kShapeMismatch,
                   "exemplar crop must be " + std::to_string(cfg_.exemplar_size) + " pixels, got " +
                       shape_str(exemplar.shape()));
    const auto bundle = backbone_->extract_features(exemplar);
    return TemplateFeatures<T>{{bundle[2].data, bundle[3].data, bundle[4].data}};
  }

  ModelOutput<T> forward(const TemplateFeatures<T>& z, const Var<T>& search, bool with_traces = false) const {
    SIAMATTN_CHECK(search.dim(1) == cfg_.search_size, ErrorCode::kShapeMismatch,
                   "search crop must be " + std::to_string(cfg_.search_size) + " pixels, got " +
                       shape_str(search.shape()));
    const auto bundle = backbone_->extract_features(search);
    ModelOutput<T> out;
    std::array<Var<T>, 3> correlations;
    for (std::size_t s = 0; s < 3; ++s) {
      auto [za, xa] = dsa_[s](z.stages[s], bundle.stage[s + 2].data, cfg_.attention,
                              with_traces ? &out.traces[s] : nullptr);
      out.z_attn[s] = za;
      out.x_attn[s] = xa;
      const Var<T> kernel = center_crop(za, cfg_.template_crop);
      out.per_stage[s] = rpn_[s](kernel, xa);
      if (cfg_.refinement.enabled) correlations[s] = normalized_xcorr(xa, kernel);
    }
    out.fused = fuse_stages<T>(out.per_stage, cls_fusion_, reg_fusion_);
    if (cfg_.refinement.enabled) {
      out.pyramid = refiner_.build_fused_features(correlations, response_frame(), {bundle.stage[0], bundle.stage[1]});
    }
    return out;
  }

  ModelOutput<T> forward(const Var<T>& exemplar, const Var<T>& search) const {
    return forward(encode_template(exemplar), search);
  }

 private:
  ModelConfig cfg_;
  ParameterStore<T> store_;
  std::unique_ptr<Backbone<T>> backbone_;
  std::array<DsaBlock<T>, 3> dsa_;
  std::array<RpnBlock<T>, 3> rpn_;
  Var<T> cls_fusion_, reg_fusion_;
  RegionRefiner<T> refiner_;
  AnchorSet anchors_;
};

}  // namespace siamattn
