#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "siamattn/data.hpp"
#include "siamattn/metrics.hpp"
#include "siamattn/model.hpp"
#include "siamattn/tracker.hpp"
#include "siamattn/training.hpp"

namespace siamattn {

using Json = nlohmann::json;

struct DataConfig {
  std::string train_root;  // empty: train on generated sequences
  std::string eval_root;   // empty: evaluate on generated sequences
  double context_amount = 0.5;
  double search_ratio = 0;

  bool operator==(const DataConfig&) const = default;
};

struct SyntheticConfig {
  SyntheticSuiteConfig train;
  SyntheticSuiteConfig eval;
};

struct RunConfig {
  std::string preset = "paper";
  std::uint64_t seed = 1;
  ModelConfig model;
  TrainingConfig training;
  TrackerConfig tracker;
  DataConfig data;
  SyntheticConfig synthetic;
  ResetProtocol protocol;

  static RunConfig paper() { return RunConfig{}; }

  // Desk-scale defaults: tiny backbone, short schedule, small synthetic suites.
  static RunConfig tiny() {
    RunConfig c;
    c.preset = "tiny";
    c.model = ModelConfig::tiny();
    auto& s = c.training.schedule;
    s.epochs = 12;
    s.warmup_epochs = 1;
    s.warmup_lr = 5e-3;
    s.lr_start = 1e-2;
    s.lr_end = 2e-3;
    s.backbone_frozen_epochs = 0;
    s.backbone_lr_factor = 0.5;
    s.batch_size = 4;
    s.steps_per_epoch = 40;
    s.weight_decay = 1e-4;
    SyntheticSpec base;
    base.width = 128;
    base.height = 128;
    base.length = 40;
    base.target_w = 28;
    base.target_h = 28;
    base.speed = 2.5;
    base.distractor_count = 2;
    c.synthetic.train.base = base;
    c.synthetic.train.count = 64;
    c.synthetic.train.seed = 100;
    c.synthetic.eval.base = base;
    c.synthetic.eval.count = 20;
    c.synthetic.eval.seed = 9000;
    return c;
  }

  CropConfig crop_config() const {
    CropConfig cc;
    cc.exemplar_size = model.exemplar_size;
    cc.search_size = model.search_size;
    cc.context_amount = data.context_amount;
    cc.search_ratio = data.search_ratio;
    return cc;
  }

  void validate() const {
    model.validate();
    training.schedule.validate();
    SIAMATTN_CHECK(training.weights.lambda1 >= 0 && training.weights.lambda2 >= 0 && training.weights.lambda3 >= 0,
                   ErrorCode::kConfigInvalid, "training loss weights must be non-negative");
    SIAMATTN_CHECK(tracker.window_influence >= 0 && tracker.window_influence <= 1 && tracker.size_lr >= 0 &&
                       tracker.size_lr <= 1 && tracker.penalty_k >= 0,
                   ErrorCode::kConfigInvalid, "tracker penalties out of range");
    synthetic.train.base.validate();
    synthetic.eval.base.validate();
  }
};

namespace detail {

// Reads keys from one JSON object and rejects any it did not consume.
class SectionReader {
 public:
  SectionReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    SIAMATTN_CHECK(j_.is_object(), ErrorCode::kConfigInvalid, "config section '" + path_ + "' must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kConfigInvalid, "config key '" + qualified(key) + "' has the wrong type: " + e.what());
    }
  }

  const Json* section(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key()))
        throw Error(ErrorCode::kConfigUnknownKey, "unknown config key '" + qualified(item.key()) + "'");
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline const char* shape_name(TargetShape s) { return s == TargetShape::kEllipse ? "ellipse" : "rectangle"; }

inline TargetShape parse_shape(const std::string& s) {
  if (s == "ellipse") return TargetShape::kEllipse;
  if (s == "rectangle") return TargetShape::kRectangle;
  throw Error(ErrorCode::kConfigInvalid, "unknown target shape '" + s + "'");
}

inline void read_suite(const Json& j, const std::string& path, SyntheticSuiteConfig& s) {
  SectionReader r(j, path);
  r.get("count", s.count);
  r.get("seed", s.seed);
  r.get("size_jitter", s.size_jitter);
  r.get("occlusion_probability", s.occlusion_probability);
  r.get("occlusion_length", s.occlusion_length);
  auto& b = s.base;
  r.get("length", b.length);
  r.get("width", b.width);
  r.get("height", b.height);
  r.get("target_w", b.target_w);
  r.get("target_h", b.target_h);
  std::string shape = shape_name(b.shape);
  r.get("shape", shape);
  b.shape = parse_shape(shape);
  r.get("speed", b.speed);
  r.get("distractor_count", b.distractor_count);
  r.get("deformation", b.deformation);
  r.get("deformation_period", b.deformation_period);
  r.get("noise", b.noise);
  r.finish();
}

inline Json write_suite(const SyntheticSuiteConfig& s) {
  const auto& b = s.base;
  return Json{{"count", s.count},
              {"seed", s.seed},
              {"size_jitter", s.size_jitter},
              {"occlusion_probability", s.occlusion_probability},
              {"occlusion_length", s.occlusion_length},
              {"length", b.length},
              {"width", b.width},
              {"height", b.height},
              {"target_w", b.target_w},
              {"target_h", b.target_h},
              {"shape", shape_name(b.shape)},
              {"speed", b.speed},
              {"distractor_count", b.distractor_count},
              {"deformation", b.deformation},
              {"deformation_period", b.deformation_period},
              {"noise", b.noise}};
}

}  // namespace detail

inline Json config_to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& bb = m.backbone;
  const auto& at = m.attention;
  const auto& rf = m.refinement;
  const auto& s = c.training.schedule;
  const auto& w = c.training.weights;
  const auto& sp = c.training.sampling;
  const auto& pr = c.training.pairs;
  Json j;
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["model"] = {{"exemplar_size", m.exemplar_size}, {"search_size", m.search_size}, {"template_crop", m.template_crop}};
  j["backbone"] = {{"num_stages", bb.num_stages},
                   {"channels_per_stage", bb.channels_per_stage},
                   {"blocks_per_stage", bb.blocks_per_stage},
                   {"bottleneck", bb.bottleneck},
                   {"final_stride", bb.final_stride},
                   {"adjusted_channels", bb.adjusted_channels},
                   {"tiny_mode", bb.tiny_mode}};
  j["attention"] = {{"spatial_sa", at.spatial_sa},
                    {"channel_sa", at.channel_sa},
                    {"cross_attn", at.cross_attn},
                    {"deform_conv", at.deform_conv},
                    {"deform_pool", rf.deform_pool},
                    {"deform_after_sum", at.deform_after_sum},
                    {"channel_softmax", at.channel_softmax == SoftmaxAxis::kRow ? "row" : "column"}};
  j["rpn"] = {{"ratios", m.anchors.ratios},
              {"base_scale", m.anchors.base_scale},
              {"stride", m.anchors.stride},
              {"positive_iou", sp.thresholds.positive},
              {"negative_iou", sp.thresholds.negative},
              {"anchor_total", sp.anchor_total},
              {"anchor_max_positive", sp.anchor_max_positive},
              {"smooth_l1_beta", sp.smooth_l1_beta}};
  j["refinement"] = {{"enabled", rf.enabled},
                     {"fusion_channels", rf.fusion_channels},
                     {"box_pool", rf.box_pool},
                     {"mask_pool", rf.mask_pool},
                     {"mask_size", rf.mask_size},
                     {"mask_branch_size", rf.mask_branch_size},
                     {"box_hidden", rf.box_hidden},
                     {"mask_channels", rf.mask_channels},
                     {"pool_samples", rf.pool_samples},
                     {"offset_gamma", rf.offset_gamma},
                     {"regions_per_pair", rf.regions_per_pair},
                     {"region_iou", sp.refine_iou},
                     {"mask_threshold", rf.mask_threshold}};
  j["training"] = {{"epochs", s.epochs},
                   {"warmup_epochs", s.warmup_epochs},
                   {"warmup_lr", s.warmup_lr},
                   {"lr_start", s.lr_start},
                   {"lr_end", s.lr_end},
                   {"backbone_frozen_epochs", s.backbone_frozen_epochs},
                   {"backbone_lr_factor", s.backbone_lr_factor},
                   {"batch_size", s.batch_size},
                   {"momentum", s.momentum},
                   {"weight_decay", s.weight_decay},
                   {"steps_per_epoch", s.steps_per_epoch},
                   {"per_step_decay", s.per_step_decay},
                   {"grad_clip", s.grad_clip},
                   {"lambda1", w.lambda1},
                   {"lambda2", w.lambda2},
                   {"lambda3", w.lambda3},
                   {"max_gap", pr.max_gap},
                   {"shift", pr.shift},
                   {"scale_jitter", pr.scale_jitter}};
  j["tracker"] = {{"window_influence", c.tracker.window_influence},
                  {"penalty_k", c.tracker.penalty_k},
                  {"size_lr", c.tracker.size_lr},
                  {"mode", c.tracker.mode == TrackMode::kAxisAligned ? "axis" : "rotated"},
                  {"min_size", c.tracker.min_size}};
  j["data"] = {{"train_root", c.data.train_root},
               {"eval_root", c.data.eval_root},
               {"context_amount", c.data.context_amount},
               {"search_ratio", c.data.search_ratio}};
  j["synthetic"] = {{"train", detail::write_suite(c.synthetic.train)}, {"eval", detail::write_suite(c.synthetic.eval)}};
  j["eval"] = {{"reinit_delay", c.protocol.reinit_delay}, {"burn_in", c.protocol.burn_in}};
  return j;
}

// Starts from the preset named by "preset" (default "paper") and applies every
// other key on top. Unknown keys raise E_CONFIG_UNKNOWN_KEY.
inline RunConfig config_from_json(const Json& j) {
  detail::SectionReader top(j, "");
  std::string preset = "paper";
  top.get("preset", preset);
  RunConfig c;
  if (preset == "tiny") c = RunConfig::tiny();
  else if (preset == "paper") c = RunConfig::paper();
  else throw Error(ErrorCode::kConfigInvalid, "unknown preset '" + preset + "' (expected paper or tiny)");
  top.get("seed", c.seed);
  auto& m = c.model;
  if (const Json* s = top.section("model")) {
    detail::SectionReader r(*s, "model");
    r.get("exemplar_size", m.exemplar_size);
    r.get("search_size", m.search_size);
    r.get("template_crop", m.template_crop);
    r.finish();
  }
  if (const Json* s = top.section("backbone")) {
    detail::SectionReader r(*s, "backbone");
    auto& b = m.backbone;
    r.get("num_stages", b.num_stages);
    r.get("channels_per_stage", b.channels_per_stage);
    r.get("blocks_per_stage", b.blocks_per_stage);
    r.get("bottleneck", b.bottleneck);
    r.get("final_stride", b.final_stride);
    r.get("adjusted_channels", b.adjusted_channels);
    r.get("tiny_mode", b.tiny_mode);
    r.finish();
  }
  if (const Json* s = top.section("attention")) {
    detail::SectionReader r(*s, "attention");
    auto& a = m.attention;
    r.get("spatial_sa", a.spatial_sa);
    r.get("channel_sa", a.channel_sa);
    r.get("cross_attn", a.cross_attn);
    r.get("deform_conv", a.deform_conv);
    r.get("deform_pool", m.refinement.deform_pool);
    r.get("deform_after_sum", a.deform_after_sum);
    std::string axis = a.channel_softmax == SoftmaxAxis::kRow ? "row" : "column";
    r.get("channel_softmax", axis);
    if (axis == "row") a.channel_softmax = SoftmaxAxis::kRow;
    else if (axis == "column") a.channel_softmax = SoftmaxAxis::kColumn;
    else throw Error(ErrorCode::kConfigInvalid, "attention.channel_softmax must be row or column");
    r.finish();
  }
  auto& sp = c.training.sampling;
  if (const Json* s = top.section("rpn")) {
    detail::SectionReader r(*s, "rpn");
    r.get("ratios", m.anchors.ratios);
    r.get("base_scale", m.anchors.base_scale);
    r.get("stride", m.anchors.stride);
    r.get("positive_iou", sp.thresholds.positive);
    r.get("negative_iou", sp.thresholds.negative);
    r.get("anchor_total", sp.anchor_total);
    r.get("anchor_max_positive", sp.anchor_max_positive);
    r.get("smooth_l1_beta", sp.smooth_l1_beta);
    r.finish();
  }
  if (const Json* s = top.section("refinement")) {
    detail::SectionReader r(*s, "refinement");
    auto& rf = m.refinement;
    r.get("enabled", rf.enabled);
    r.get("fusion_channels", rf.fusion_channels);
    r.get("box_pool", rf.box_pool);
    r.get("mask_pool", rf.mask_pool);
    r.get("mask_size", rf.mask_size);
    r.get("mask_branch_size", rf.mask_branch_size);
    r.get("box_hidden", rf.box_hidden);
    r.get("mask_channels", rf.mask_channels);
    r.get("pool_samples", rf.pool_samples);
    r.get("offset_gamma", rf.offset_gamma);
    r.get("regions_per_pair", rf.regions_per_pair);
    r.get("region_iou", sp.refine_iou);
    r.get("mask_threshold", rf.mask_threshold);
    r.finish();
  }
  if (const Json* s = top.section("training")) {
    detail::SectionReader r(*s, "training");
    auto& sc = c.training.schedule;
    r.get("epochs", sc.epochs);
    r.get("warmup_epochs", sc.warmup_epochs);
    r.get("warmup_lr", sc.warmup_lr);
    r.get("lr_start", sc.lr_start);
    r.get("lr_end", sc.lr_end);
    r.get("backbone_frozen_epochs", sc.backbone_frozen_epochs);
    r.get("backbone_lr_factor", sc.backbone_lr_factor);
    r.get("batch_size", sc.batch_size);
    r.get("momentum", sc.momentum);
    r.get("weight_decay", sc.weight_decay);
    r.get("steps_per_epoch", sc.steps_per_epoch);
    r.get("per_step_decay", sc.per_step_decay);
    r.get("grad_clip", sc.grad_clip);
    r.get("lambda1", c.training.weights.lambda1);
    r.get("lambda2", c.training.weights.lambda2);
    r.get("lambda3", c.training.weights.lambda3);
    r.get("max_gap", c.training.pairs.max_gap);
    r.get("shift", c.training.pairs.shift);
    r.get("scale_jitter", c.training.pairs.scale_jitter);
    r.finish();
  }
  if (const Json* s = top.section("tracker")) {
    detail::SectionReader r(*s, "tracker");
    r.get("window_influence", c.tracker.window_influence);
    r.get("penalty_k", c.tracker.penalty_k);
    r.get("size_lr", c.tracker.size_lr);
    std::string mode = c.tracker.mode == TrackMode::kAxisAligned ? "axis" : "rotated";
    r.get("mode", mode);
    if (mode == "axis") c.tracker.mode = TrackMode::kAxisAligned;
    else if (mode == "rotated") c.tracker.mode = TrackMode::kRotatedFromMask;
    else throw Error(ErrorCode::kConfigInvalid, "tracker.mode must be axis or rotated");
    r.get("min_size", c.tracker.min_size);
    r.finish();
  }
  if (const Json* s = top.section("data")) {
    detail::SectionReader r(*s, "data");
    r.get("train_root", c.data.train_root);
    r.get("eval_root", c.data.eval_root);
    r.get("context_amount", c.data.context_amount);
    r.get("search_ratio", c.data.search_ratio);
    r.finish();
  }
  c.tracker.context_amount = c.data.context_amount;
  if (const Json* s = top.section("synthetic")) {
    detail::SectionReader r(*s, "synthetic");
    if (const Json* t = r.section("train")) detail::read_suite(*t, "synthetic.train", c.synthetic.train);
    if (const Json* e = r.section("eval")) detail::read_suite(*e, "synthetic.eval", c.synthetic.eval);
    r.finish();
  }
  if (const Json* s = top.section("eval")) {
    detail::SectionReader r(*s, "eval");
    r.get("reinit_delay", c.protocol.reinit_delay);
    r.get("burn_in", c.protocol.burn_in);
    r.finish();
  }
  top.finish();
  c.preset = preset;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  SIAMATTN_CHECK(in.good(), ErrorCode::kIo, "cannot open config " + path);
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfigInvalid, "config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// FNV-1a over the canonical (key-sorted) JSON text of the resolved config.
inline std::string config_hash(const RunConfig& c) {
  const std::string text = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Keys that change the parameter set; checkpoints must agree on all of them.
inline std::vector<std::string> architecture_keys() {
  return {"/model/exemplar_size",        "/model/search_size",          "/model/template_crop",
          "/backbone/channels_per_stage", "/backbone/blocks_per_stage",  "/backbone/bottleneck",
          "/backbone/adjusted_channels",  "/rpn/ratios",                 "/refinement/fusion_channels",
          "/refinement/box_pool",         "/refinement/mask_pool",       "/refinement/mask_size",
          "/refinement/box_hidden",       "/refinement/mask_channels",   "/backbone/tiny_mode"};
}

inline std::vector<std::string> architecture_differences(const Json& a, const Json& b) {
  std::vector<std::string> diff;
  for (const auto& key : architecture_keys()) {
    const Json::json_pointer ptr(key);
    const bool ha = a.contains(ptr), hb = b.contains(ptr);
    if (ha != hb || (ha && a.at(ptr) != b.at(ptr))) diff.push_back(key.substr(1));
  }
  for (auto& d : diff)
    for (auto& ch : d)
      if (ch == '/') ch = '.';
  return diff;
}

}  // namespace siamattn
