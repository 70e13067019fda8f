#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "siamattn/data.hpp"
#include "siamattn/losses.hpp"
#include "siamattn/model.hpp"

namespace siamattn {

struct LossWeights {
  double lambda1 = 0.2;  // rpn regression
  double lambda2 = 0.2;  // refinement box
  double lambda3 = 0.1;  // refinement mask

  bool operator==(const LossWeights&) const = default;
};

struct LossBreakdown {
  double rpn_cls = 0;
  double rpn_reg = 0;
  double refine_box = 0;
  double refine_mask = 0;
  double total = 0;
  bool no_positive_anchors = false;
};

inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
  return b.rpn_cls + w.lambda1 * b.rpn_reg + w.lambda2 * b.refine_box + w.lambda3 * b.refine_mask;
}

struct SamplingConfig {
  int anchor_total = 64;
  int anchor_max_positive = 16;
  LabelThresholds thresholds;
  double smooth_l1_beta = 1.0 / 9.0;
  double refine_iou = 0.5;

  bool operator==(const SamplingConfig&) const = default;
};

// Up to `max_positive` positives, then negatives until `total`.
inline std::vector<AnchorTarget> sample_anchor_targets(const std::vector<AnchorLabel>& labels,
                                                       const SamplingConfig& cfg, Rng& rng) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == AnchorLabel::kPositive) pos.push_back(i);
    else if (labels[i] == AnchorLabel::kNegative) neg.push_back(i);
  }
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  pos.resize(std::min<std::size_t>(pos.size(), static_cast<std::size_t>(cfg.anchor_max_positive)));
  const std::size_t n_neg = std::min<std::size_t>(neg.size(), static_cast<std::size_t>(cfg.anchor_total) - pos.size());
  std::vector<AnchorTarget> out;
  for (std::size_t i : pos) out.push_back({i, 1});
  for (std::size_t i = 0; i < n_neg; ++i) out.push_back({neg[i], 0});
  std::sort(out.begin(), out.end(), [](const AnchorTarget& a, const AnchorTarget& b) { return a.index < b.index; });
  return out;
}

// Jitter bounds (centre <= 5% of the size, sides within 10%) keep IoU > 0.8.
inline Box jitter_box(const Box& gt, Rng& rng) {
  std::uniform_real_distribution<double> shift(-0.05, 0.05), scale(0.9, 1.1);
  return Box{gt.cx + shift(rng) * gt.w, gt.cy + shift(rng) * gt.h, gt.w * scale(rng), gt.h * scale(rng)};
}

inline std::vector<Box> sample_refine_regions(const std::vector<Box>& proposals, const Box& gt, int count,
                                              Rng& rng, double min_iou = 0.5) {
  std::vector<Box> qualified;
  for (const auto& p : proposals)
    if (p.valid() && iou(p, gt) > min_iou) qualified.push_back(p);
  std::vector<Box> out;
  if (static_cast<int>(qualified.size()) >= count) {
    std::shuffle(qualified.begin(), qualified.end(), rng);
    out.assign(qualified.begin(), qualified.begin() + count);
  } else if (!qualified.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, qualified.size() - 1);
    for (int i = 0; i < count; ++i) out.push_back(qualified[pick(rng)]);
  } else {
    for (int i = 0; i < count; ++i) out.push_back(jitter_box(gt, rng));
  }
  return out;
}

// Target mask over a region: mask_size x mask_size samples at bin centres.
inline std::vector<double> mask_target(const Mask& mask, const Box& region, int mask_size) {
  std::vector<double> out(static_cast<std::size_t>(mask_size) * mask_size, 0.0);
  const double bw = region.w / mask_size, bh = region.h / mask_size;
  for (int i = 0; i < mask_size; ++i) {
    const double y = region.y1() + (i + 0.5) * bh;
    for (int j = 0; j < mask_size; ++j) {
      const double x = region.x1() + (j + 0.5) * bw;
      if (y < 0 || x < 0 || y >= mask.height || x >= mask.width) continue;
      out[static_cast<std::size_t>(i) * mask_size + j] = sample_clamped(mask, 0, y - 0.5, x - 0.5);
    }
  }
  return out;
}

template <typename T>
struct LossResult {
  LossBreakdown breakdown;
  Var<T> total;
};

// Total loss for one pair. The mask term is zero when the pair has no mask.
template <typename T>
LossResult<T> compute_loss(const SiamAttnModel<T>& model, const ModelOutput<T>& out, const Box& gt,
                           const Mask* gt_mask, const LossWeights& weights, const SamplingConfig& sampling,
                           Rng& rng) {
  const auto& anchors = model.anchors();
  const int k = anchors.k;
  LossResult<T> res;
  auto& b = res.breakdown;
  const auto labels = label_anchors(anchors, gt, sampling.thresholds);
  const auto targets = sample_anchor_targets(labels, sampling, rng);
  std::vector<Var<T>> terms;
  const Var<T> cls = anchor_nll(out.fused.cls, k, targets);
  b.rpn_cls = cls.item();
  terms.push_back(cls);

  std::vector<std::size_t> pos;
  std::vector<std::array<double, 4>> reg_targets;
  for (const auto& t : targets) {
    if (t.label != 1) continue;
    pos.push_back(t.index);
    const BoxDelta d = encode(gt, anchors.boxes[t.index]);
    reg_targets.push_back({d.tx, d.ty, d.tw, d.th});
  }
  if (pos.empty()) {
    b.no_positive_anchors = true;
  } else {
    const Var<T> reg = anchor_smooth_l1(out.fused.reg, k, pos, reg_targets, sampling.smooth_l1_beta);
    b.rpn_reg = reg.item();
    terms.push_back(scale(reg, static_cast<T>(weights.lambda1)));

    const auto& rcfg = model.config().refinement;
    if (rcfg.enabled) {
      const int crop = model.config().search_size;
      const auto proposals = decode_proposals(out.fused.reg.value(), anchors);
      const auto regions = sample_refine_regions(proposals, gt, rcfg.regions_per_pair, rng, sampling.refine_iou);
      const bool with_mask = gt_mask && !gt_mask->empty();
      std::vector<Var<T>> box_terms, mask_terms;
      for (const auto& region : regions) {
        const auto rr = model.refiner().refine(out.pyramid, region, crop, with_mask);
        const BoxDelta d = encode(gt, rr.region);
        box_terms.push_back(smooth_l1_sum(rr.box_delta, {d.tx, d.ty, d.tw, d.th}, sampling.smooth_l1_beta));
        if (with_mask) mask_terms.push_back(bce_with_logits(rr.mask_logits, mask_target(*gt_mask, rr.region, rcfg.mask_size)));
      }
      const T inv = T(1) / static_cast<T>(regions.size());
      const Var<T> box = scale(add_n(box_terms), inv);
      b.refine_box = box.item();
      terms.push_back(scale(box, static_cast<T>(weights.lambda2)));
      if (with_mask) {
        const Var<T> mask = scale(add_n(mask_terms), inv);
        b.refine_mask = mask.item();
        terms.push_back(scale(mask, static_cast<T>(weights.lambda3)));
      }
    }
  }
  res.total = add_n(terms);
  b.total = weighted_total(b, weights);
  return res;
}

struct ScheduleConfig {
  int epochs = 20;
  int warmup_epochs = 5;
  double warmup_lr = 1e-3;
  double lr_start = 5e-3;
  double lr_end = 5e-4;
  int backbone_frozen_epochs = 10;
  double backbone_lr_factor = 1.0 / 20.0;
  int batch_size = 12;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int steps_per_epoch = 50;
  bool per_step_decay = false;
  double grad_clip = 10.0;  // global L2 norm; 0 disables

  void validate() const {
    SIAMATTN_CHECK(epochs > 0 && warmup_epochs >= 0 && warmup_epochs <= epochs && batch_size > 0 &&
                       steps_per_epoch > 0,
                   ErrorCode::kConfigInvalid, "training schedule: counts must be positive");
    SIAMATTN_CHECK(warmup_lr >= 0 && lr_start > 0 && lr_end > 0 && backbone_lr_factor >= 0 && momentum >= 0 &&
                       momentum < 1 && weight_decay >= 0 && grad_clip >= 0,
                   ErrorCode::kConfigInvalid, "training schedule: invalid rate");
  }

  bool operator==(const ScheduleConfig&) const = default;
};

// Head-group learning rate at (epoch, step within epoch). Warm-up is constant;
// afterwards the rate decays geometrically from lr_start at the first decay
// epoch to lr_end at the last one.
inline double lr_at(const ScheduleConfig& s, int epoch, int step = 0, ParamGroup group = ParamGroup::kHead) {
  SIAMATTN_CHECK(epoch >= 0 && epoch < s.epochs, ErrorCode::kInvalidArgument,
                 "lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(s.epochs) + ")");
  double lr;
  if (epoch < s.warmup_epochs) {
    lr = s.warmup_lr;
  } else {
    const int decay_epochs = s.epochs - s.warmup_epochs;
    double t;
    if (s.per_step_decay) {
      t = (epoch - s.warmup_epochs + static_cast<double>(step) / s.steps_per_epoch) / decay_epochs;
    } else {
      t = decay_epochs > 1 ? static_cast<double>(epoch - s.warmup_epochs) / (decay_epochs - 1) : 0.0;
    }
    lr = s.lr_start * std::pow(s.lr_end / s.lr_start, std::clamp(t, 0.0, 1.0));
  }
  if (group == ParamGroup::kBackbone) return epoch < s.backbone_frozen_epochs ? 0.0 : lr * s.backbone_lr_factor;
  return lr;
}

// SGD with momentum; weight decay is applied directly to the parameters:
//   v <- mu v + g,  p <- p (1 - lr wd) - lr v.
// A group with learning rate 0 is left untouched.
template <typename T>
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(ParameterStore<T>& store, double lr_backbone, double lr_head) {
    for (auto& p : store.all()) {
      const double lr = p.group == ParamGroup::kBackbone ? lr_backbone : lr_head;
      if (lr == 0.0) continue;
      Var<T> var = p.var;
      auto& value = var.mutable_value();
      auto& vel = velocity_[p.name];
      if (vel.shape() != value.shape()) vel = Tensor<T>(value.shape());
      const bool has_grad = var.has_grad();
      const T mu = static_cast<T>(momentum_);
      const T decay = static_cast<T>(1.0 - lr * weight_decay_);
      const T rate = static_cast<T>(lr);
      for (std::size_t i = 0; i < value.size(); ++i) {
        vel[i] = mu * vel[i] + (has_grad ? var.grad()[i] : T(0));
        value[i] = value[i] * decay - rate * vel[i];
      }
    }
  }

  std::unordered_map<std::string, Tensor<T>>& state() { return velocity_; }
  const std::unordered_map<std::string, Tensor<T>>& state() const { return velocity_; }

 private:
  double momentum_;
  double weight_decay_;
  std::unordered_map<std::string, Tensor<T>> velocity_;
};

struct TrainingConfig {
  ScheduleConfig schedule;
  LossWeights weights;
  SamplingConfig sampling;
  PairSamplerConfig pairs;

  bool operator==(const TrainingConfig&) const = default;
};

template <typename T>
Var<T> crop_input(const Image& img) {
  return Var<T>(image_to_tensor<T>(img));
}

template <typename T>
void clip_gradients(ParameterStore<T>& store, T factor) {
  for (auto& p : store.all()) {
    if (!p.var.has_grad()) continue;
    Var<T> v = p.var;
    auto& g = v.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= factor;
  }
}

// One optimisation step over `batch`; returns the batch-mean loss terms.
template <typename T>
LossBreakdown train_step(SiamAttnModel<T>& model, const std::vector<CropPair>& batch, Sgd<T>& opt,
                         double lr_backbone, double lr_head, const TrainingConfig& cfg, Rng& rng) {
  SIAMATTN_CHECK(!batch.empty(), ErrorCode::kInvalidArgument, "train_step: empty batch");
  auto& store = model.parameters();
  store.zero_grad();
  LossBreakdown mean;
  std::vector<Var<T>> totals;
  for (const auto& pair : batch) {
    const auto out = model.forward(crop_input<T>(pair.exemplar), crop_input<T>(pair.search));
    const auto res = compute_loss(model, out, pair.gt_box_in_search, pair.has_mask() ? &pair.gt_mask_in_search : nullptr,
                                  cfg.weights, cfg.sampling, rng);
    mean.rpn_cls += res.breakdown.rpn_cls;
    mean.rpn_reg += res.breakdown.rpn_reg;
    mean.refine_box += res.breakdown.refine_box;
    mean.refine_mask += res.breakdown.refine_mask;
    mean.no_positive_anchors = mean.no_positive_anchors || res.breakdown.no_positive_anchors;
    totals.push_back(res.total);
  }
  const double n = static_cast<double>(batch.size());
  mean.rpn_cls /= n;
  mean.rpn_reg /= n;
  mean.refine_box /= n;
  mean.refine_mask /= n;
  mean.total = weighted_total(mean, cfg.weights);
  const Var<T> total = scale(add_n(totals), static_cast<T>(1.0 / n));
  if (!std::isfinite(static_cast<double>(total.item()))) {
    std::ostringstream os;
    os << "non-finite loss: rpn_cls=" << mean.rpn_cls << " rpn_reg=" << mean.rpn_reg
       << " refine_box=" << mean.refine_box << " refine_mask=" << mean.refine_mask;
    throw Error(ErrorCode::kNanLoss, os.str());
  }
  backward(total);
  double sq = 0;
  for (const auto& p : store.all()) {
    if (!p.var.has_grad()) continue;
    if (!p.var.grad().all_finite()) throw Error(ErrorCode::kNanLoss, "non-finite gradient for parameter " + p.name);
    for (std::size_t i = 0; i < p.var.grad().size(); ++i) sq += static_cast<double>(p.var.grad()[i]) * p.var.grad()[i];
  }
  const double clip = cfg.schedule.grad_clip;
  if (clip > 0 && std::sqrt(sq) > clip) clip_gradients(store, static_cast<T>(clip / std::sqrt(sq)));
  opt.step(store, lr_backbone, lr_head);
  return mean;
}

struct TrainLogRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0;
  LossBreakdown loss;
};

inline std::string format_log_record(const TrainLogRecord& r, const std::string& config_hash) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "{\"step\":" << r.step << ",\"epoch\":" << r.epoch << ",\"lr\":" << r.lr << ",\"rpn_cls\":" << r.loss.rpn_cls
     << ",\"rpn_reg\":" << r.loss.rpn_reg << ",\"refine_box\":" << r.loss.refine_box
     << ",\"refine_mask\":" << r.loss.refine_mask << ",\"total\":" << r.loss.total
     << ",\"no_positive\":" << (r.loss.no_positive_anchors ? "true" : "false") << ",\"config_hash\":\""
     << config_hash << "\"}";
  return os.str();
}

// Runs the full schedule. Pair indices and per-step sampling seeds are pure
// functions of (seed, step), so a run is reproducible from its seed.
template <typename T>
class Trainer {
 public:
  using EpochCallback = std::function<void(int epoch, const Sgd<T>& opt)>;

  Trainer(SiamAttnModel<T>& model, const PairSampler& sampler, TrainingConfig cfg, std::uint64_t seed)
      : model_(model), sampler_(sampler), cfg_(std::move(cfg)), seed_(seed),
        opt_(cfg_.schedule.momentum, cfg_.schedule.weight_decay) {
    cfg_.schedule.validate();
  }

  Sgd<T>& optimizer() { return opt_; }

  std::vector<TrainLogRecord> run(std::ostream* log = nullptr, const std::string& config_hash = "",
                                  const EpochCallback& on_epoch_end = {}, int start_epoch = 0) {
    std::vector<TrainLogRecord> records;
    const auto& s = cfg_.schedule;
    for (int epoch = start_epoch; epoch < s.epochs; ++epoch) {
      for (int step = 0; step < s.steps_per_epoch; ++step) {
        const long global = static_cast<long>(epoch) * s.steps_per_epoch + step;
        std::vector<CropPair> batch;
        for (int i = 0; i < s.batch_size; ++i)
          batch.push_back(sampler_.sample(static_cast<std::uint64_t>(global) * s.batch_size + i));
        Rng rng(mix_seed(seed_ ^ 0x5EEDULL, static_cast<std::uint64_t>(global)));
        const double lr = lr_at(s, epoch, step);
        const double lr_bb = lr_at(s, epoch, step, ParamGroup::kBackbone);
        TrainLogRecord rec{global, epoch, lr, train_step(model_, batch, opt_, lr_bb, lr, cfg_, rng)};
        if (log) *log << format_log_record(rec, config_hash) << '\n';
        records.push_back(rec);
      }
      if (on_epoch_end) on_epoch_end(epoch, opt_);
    }
    return records;
  }

 private:
  SiamAttnModel<T>& model_;
  const PairSampler& sampler_;
  TrainingConfig cfg_;
  std::uint64_t seed_;
  Sgd<T> opt_;
};

}  // namespace siamattn
