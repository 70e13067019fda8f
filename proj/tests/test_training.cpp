#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "support.hpp"

using namespace siamattn;
using namespace siamattn::testing;

namespace {

double log_softmax_oracle(double picked, double other) {
  return picked - std::log(std::exp(picked) + std::exp(other));
}

// Refinement regions are detached from the regression output. With
// refine_iou = 1 no proposal qualifies, so the regions come from the jittered
// gt and finite differences see the same detached function.
template <typename T>
auto total_loss_fn(const SiamAttnModel<T>& model, const CropPair& pair) {
  return [&model, &pair] {
    const auto out = model.forward(crop_input<T>(pair.exemplar), crop_input<T>(pair.search));
    Rng rng(9);
    SamplingConfig sampling;
    sampling.refine_iou = 1.0;
    return compute_loss(model, out, pair.gt_box_in_search, &pair.gt_mask_in_search, LossWeights{}, sampling,
                        rng)
        .total;
  };
}

}  // namespace

TEST(LossArithmetic, UnitTermsWeighToOnePointFive) {
  LossBreakdown b;
  b.rpn_cls = b.rpn_reg = b.refine_box = b.refine_mask = 1.0;
  EXPECT_NEAR(weighted_total(b, LossWeights{}), 1.5, 1e-6);
  b = {};
  b.rpn_cls = 0.3;
  b.rpn_reg = 2.0;
  b.refine_box = 0.5;
  b.refine_mask = 0.25;
  EXPECT_NEAR(weighted_total(b, LossWeights{}), 0.3 + 0.4 + 0.1 + 0.025, 1e-6);
}

TEST(LossArithmetic, AnchorNllMatchesLogSoftmaxOracle) {
  Rng rng(1);
  const int k = 2;
  const auto cls = random_var<float>({2 * k, 3, 3}, rng, -2, 2);
  const std::vector<AnchorTarget> targets{{0, 1}, {4, 0}, {11, 1}, {17, 0}};
  double want = 0;
  const std::size_t fg = 2 * 9;
  for (const auto& t : targets) {
    const double bg_logit = cls.value()[t.index], fg_logit = cls.value()[fg + t.index];
    want -= t.label == 1 ? log_softmax_oracle(fg_logit, bg_logit) : log_softmax_oracle(bg_logit, fg_logit);
  }
  EXPECT_NEAR(anchor_nll(cls, k, targets).item(), want / 4, 1e-6);
}

TEST(LossArithmetic, SmoothL1MatchesPiecewiseDefinition) {
  const double beta = 1.0 / 9.0;
  const Var<float> pred(Tensor<float>(Shape{4, 1}, std::vector<float>{0.05f, -0.5f, 0.f, 2.f}));
  const std::vector<double> target{0.0, 0.0, 0.1, 0.0};
  const double want = 0.5 * 0.05 * 0.05 / beta + (0.5 - 0.5 * beta) + 0.5 * 0.1 * 0.1 / beta + (2 - 0.5 * beta);
  EXPECT_NEAR(smooth_l1_sum(pred, target, beta).item(), want, 1e-6);
}

TEST(LossArithmetic, PerfectPredictionsGiveZero) {
  const int k = 1;
  Tensor<float> cls(Shape{2, 2, 2});
  // Anchors 0 and 3 positive, 1 and 2 negative.
  for (int p = 0; p < 4; ++p) {
    const bool pos = p == 0 || p == 3;
    cls[static_cast<std::size_t>(p)] = pos ? -20.f : 20.f;
    cls[static_cast<std::size_t>(4 + p)] = pos ? 20.f : -20.f;
  }
  const std::vector<AnchorTarget> targets{{0, 1}, {1, 0}, {2, 0}, {3, 1}};
  LossBreakdown b;
  b.rpn_cls = anchor_nll(Var<float>(cls), k, targets).item();
  Tensor<float> reg(Shape{4, 2, 2});
  for (int c = 0; c < 4; ++c) reg.at(c, 0, 0) = 0.1f * static_cast<float>(c);
  b.rpn_reg = anchor_smooth_l1(Var<float>(reg), k, {0}, {{0.0, 0.1, 0.2, 0.3}}, 1.0 / 9).item();
  b.refine_box = smooth_l1_sum(Var<float>(Tensor<float>(Shape{4, 1})), {0, 0, 0, 0}, 1.0 / 9).item();
  Tensor<float> logits(Shape{1, 64, 64});
  std::vector<double> mask(64 * 64);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = i % 3 == 0 ? 1.0 : 0.0;
    logits[i] = mask[i] > 0 ? 30.f : -30.f;
  }
  b.refine_mask = bce_with_logits(Var<float>(logits), mask).item();
  EXPECT_NEAR(b.rpn_cls, 0, 1e-6);
  EXPECT_NEAR(b.rpn_reg, 0, 1e-6);
  EXPECT_EQ(b.refine_box, 0);
  EXPECT_NEAR(b.refine_mask, 0, 1e-6);
  EXPECT_NEAR(weighted_total(b, LossWeights{}), 0, 1e-6);
}

TEST(LossArithmetic, ZeroLogitsAgainstOnesGiveLnTwo) {
  const Var<float> logits(Tensor<float>(Shape{1, 64, 64}));
  EXPECT_NEAR(bce_with_logits(logits, std::vector<double>(64 * 64, 1.0)).item(), std::log(2.0), 1e-6);
}

TEST(ComputeLoss, BreakdownIsConsistentWithAutogradTotal) {
  const auto cfg = ModelConfig::tiny();
  SiamAttnModel<float> model(cfg, 2);
  const auto pair = tiny_pair();
  const auto out = model.forward(crop_input<float>(pair.exemplar), crop_input<float>(pair.search));
  Rng rng(4);
  const auto res = compute_loss(model, out, pair.gt_box_in_search, &pair.gt_mask_in_search, LossWeights{},
                                SamplingConfig{}, rng);
  const auto& b = res.breakdown;
  EXPECT_FALSE(b.no_positive_anchors);
  EXPECT_GT(b.rpn_cls, 0);
  EXPECT_GT(b.rpn_reg, 0);
  EXPECT_GT(b.refine_box, 0);
  EXPECT_GT(b.refine_mask, 0);
  EXPECT_NEAR(b.total, b.rpn_cls + 0.2 * b.rpn_reg + 0.2 * b.refine_box + 0.1 * b.refine_mask, 1e-12);
  EXPECT_NEAR(res.total.item(), b.total, 1e-5 * std::max(1.0, b.total));
}

TEST(ComputeLoss, NoPositiveAnchorsZeroesRegressionAndRefinement) {
  SiamAttnModel<float> model(ModelConfig::tiny(), 2);
  const auto pair = tiny_pair();
  const auto out = model.forward(crop_input<float>(pair.exemplar), crop_input<float>(pair.search));
  Rng rng(5);
  // A 2-pixel box overlaps no anchor above the positive threshold.
  const auto res = compute_loss(model, out, Box{64, 64, 2, 2}, &pair.gt_mask_in_search, LossWeights{},
                                SamplingConfig{}, rng);
  EXPECT_TRUE(res.breakdown.no_positive_anchors);
  EXPECT_EQ(res.breakdown.rpn_reg, 0);
  EXPECT_EQ(res.breakdown.refine_box, 0);
  EXPECT_EQ(res.breakdown.refine_mask, 0);
  EXPECT_GT(res.breakdown.rpn_cls, 0);
}

TEST(ComputeLoss, PairsWithoutMaskGiveNoMaskGradient) {
  SiamAttnModel<float> model(ModelConfig::tiny(), 2);
  const auto pair = tiny_pair();
  auto mask_grad_norm = [&](const Mask* mask) {
    model.parameters().zero_grad();
    const auto out = model.forward(crop_input<float>(pair.exemplar), crop_input<float>(pair.search));
    Rng rng(6);
    const auto res = compute_loss(model, out, pair.gt_box_in_search, mask, LossWeights{}, SamplingConfig{}, rng);
    backward(res.total);
    double sq = 0;
    for (const auto& p : model.parameters().all()) {
      if (p.name.rfind("refine.mask_head.", 0) != 0 || !p.var.has_grad()) continue;
      for (float g : p.var.grad().values()) sq += static_cast<double>(g) * g;
    }
    return std::make_pair(res.breakdown.refine_mask, sq);
  };
  const auto [with_loss, with_grad] = mask_grad_norm(&pair.gt_mask_in_search);
  EXPECT_GT(with_loss, 0);
  EXPECT_GT(with_grad, 0);
  const auto [without_loss, without_grad] = mask_grad_norm(nullptr);
  EXPECT_EQ(without_loss, 0);
  EXPECT_EQ(without_grad, 0);
}

TEST(ComputeLoss, TotalLossGradientMatchesFiniteDifferences) {
  const auto cfg = ModelConfig::tiny();
  SiamAttnModel<float> mf(cfg, 7);
  SiamAttnModel<double> md(cfg, 7);
  Rng noise(8);
  // Moves the zero-initialised offset predictors away from zero.
  for (const auto& p : mf.parameters().all()) {
    if (p.name.find("offset") == std::string::npos) continue;
    Var<float> v = p.var;
    std::uniform_real_distribution<double> d(-0.05, 0.05);
    for (auto& x : v.mutable_value().values()) x = static_cast<float>(d(noise));
  }
  const auto pair = tiny_pair();
  std::set<std::string> probe;
  const auto& all = mf.parameters().all();
  for (std::size_t i = 0; i < all.size(); i += std::max<std::size_t>(1, all.size() / 24)) probe.insert(all[i].name);
  probe.insert("refine.box_head.out.weight");
  probe.insert("refine.mask_head.deconv.weight");
  const auto res = compare_gradients(mf.parameters(), total_loss_fn(mf, pair), md.parameters(),
                                     total_loss_fn(md, pair), 3, 10,
                                     [&](const std::string& n) { return probe.count(n) > 0; });
  EXPECT_GE(res.tensors, 15);
  EXPECT_LT(res.max_error, 1e-3) << res.worst;
}

TEST(RefineRegions, ThirtyQualifyingGiveSixteenDistinct) {
  Rng rng(10);
  const Box gt{50, 50, 40, 40};
  std::vector<Box> proposals;
  for (int i = 0; i < 30; ++i) proposals.push_back(Box{50 + 0.2 * i, 50 - 0.1 * i, 40, 40});
  for (int i = 0; i < 10; ++i) proposals.push_back(Box{150.0 + i, 150, 40, 40});
  const auto out = sample_refine_regions(proposals, gt, 16, rng);
  ASSERT_EQ(out.size(), 16u);
  std::set<double> seen;
  for (const auto& b : out) {
    EXPECT_GT(iou(b, gt), 0.5);
    seen.insert(b.cx);
  }
  EXPECT_EQ(seen.size(), 16u);
}

TEST(RefineRegions, NoneQualifyingFallsBackToJitteredGt) {
  Rng rng(11);
  const Box gt{80, 60, 30, 50};
  const std::vector<Box> proposals{Box{10, 10, 5, 5}, Box{200, 200, 30, 50}};
  for (int trial = 0; trial < 50; ++trial) {
    const auto out = sample_refine_regions(proposals, gt, 16, rng);
    ASSERT_EQ(out.size(), 16u);
    for (const auto& b : out) ASSERT_GT(iou(b, gt), 0.5);
  }
}

TEST(RefineRegions, FewQualifyingAreDrawnWithReplacement) {
  Rng rng(12);
  const Box gt{50, 50, 40, 40};
  std::vector<Box> proposals;
  for (int i = 0; i < 5; ++i) proposals.push_back(Box{50.0 + i, 50, 40, 40});
  proposals.push_back(Box{10, 10, 4, 4});
  const auto out = sample_refine_regions(proposals, gt, 16, rng);
  ASSERT_EQ(out.size(), 16u);
  for (const auto& b : out) {
    const bool member = std::any_of(proposals.begin(), proposals.begin() + 5,
                                    [&](const Box& p) { return p.cx == b.cx && p.cy == b.cy; });
    EXPECT_TRUE(member);
  }
}

TEST(Schedule, PaperLearningRates) {
  const ScheduleConfig s;
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 2), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 4), 1e-3);
  EXPECT_NEAR(lr_at(s, 5), 5e-3, 1e-15);
  EXPECT_NEAR(lr_at(s, 19), 5e-4, 1e-15);
  for (int e = 6; e < 20; ++e) {
    EXPECT_LT(lr_at(s, e), lr_at(s, e - 1));
    EXPECT_NEAR(lr_at(s, e) / lr_at(s, e - 1), std::pow(0.1, 1.0 / 14), 1e-12);
  }
  EXPECT_EQ(lr_at(s, 7, 0, ParamGroup::kBackbone), 0.0);
  EXPECT_EQ(lr_at(s, 9, 0, ParamGroup::kBackbone), 0.0);
  EXPECT_NEAR(lr_at(s, 12, 0, ParamGroup::kBackbone), lr_at(s, 12) / 20, 1e-18);
  EXPECT_THROW(lr_at(s, 20), Error);
  EXPECT_THROW(lr_at(s, -1), Error);
}

TEST(Sgd, ZeroLearningRateLeavesParametersBitIdentical) {
  SiamAttnModel<float> model(ModelConfig::tiny(), 3);
  std::vector<std::vector<float>> before;
  for (const auto& p : model.parameters().all()) before.push_back(p.var.value().storage());
  Sgd<float> opt(0.9, 1e-4);
  Rng rng(13);
  const auto b = train_step(model, {tiny_pair()}, opt, 0.0, 0.0, RunConfig::tiny().training, rng);
  EXPECT_GT(b.total, 0);
  const auto& all = model.parameters().all();
  for (std::size_t i = 0; i < all.size(); ++i) ASSERT_EQ(all[i].var.value().storage(), before[i]) << all[i].name;
}

TEST(Sgd, WeightDecayAloneShrinksByOneMinusLrWd) {
  ParameterStore<float> store;
  Rng rng(14);
  const auto w = store.create("w", ParamGroup::kHead, random_tensor<float>({3, 4}, rng));
  const auto bb = store.create("bb", ParamGroup::kBackbone, random_tensor<float>({5}, rng));
  const auto w0 = w.value(), bb0 = bb.value();
  const double lr = 0.5, wd = 0.1;
  Sgd<float> opt(0.9, wd);
  for (int s = 0; s < 3; ++s) {
    store.zero_grad();
    opt.step(store, lr / 10, lr);
  }
  const float f = static_cast<float>(1 - lr * wd), fb = static_cast<float>(1 - lr / 10 * wd);
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_FLOAT_EQ(w.value()[i], w0[i] * f * f * f);
  for (std::size_t i = 0; i < bb0.size(); ++i) EXPECT_FLOAT_EQ(bb.value()[i], bb0[i] * fb * fb * fb);
}

TEST(Sgd, MomentumAccumulatesGradients) {
  ParameterStore<float> store;
  Var<float> w = store.create("w", ParamGroup::kHead, Tensor<float>(Shape{1}, 1.f));
  Sgd<float> opt(0.5, 0.0);
  for (int s = 0; s < 2; ++s) {
    store.zero_grad();
    backward(sum(w));
    opt.step(store, 0.1, 0.1);
  }
  // v1 = 1, v2 = 0.5 + 1 = 1.5; w = 1 - 0.1 - 0.15.
  EXPECT_FLOAT_EQ(w.value()[0], 0.75f);
}

TEST(TrainStep, LossFallsOnFixedPair) {
  SiamAttnModel<float> model(ModelConfig::tiny(), 4);
  auto tc = RunConfig::tiny().training;
  Sgd<float> opt(tc.schedule.momentum, tc.schedule.weight_decay);
  const std::vector<CropPair> batch{tiny_pair()};
  std::vector<double> totals;
  for (int s = 0; s < 50; ++s) {
    Rng rng(15);
    totals.push_back(train_step(model, batch, opt, 0.01, 0.01, tc, rng).total);
  }
  const double tail = (totals[45] + totals[46] + totals[47] + totals[48] + totals[49]) / 5;
  EXPECT_LT(tail, 0.7 * totals[0]);
}

TEST(TrainStep, NanLossAbortsWithDiagnostic) {
  SiamAttnModel<float> model(ModelConfig::tiny(), 5);
  Var<float> w = model.refiner().box_output_layer().weight;
  w.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
  Sgd<float> opt(0.9, 0);
  Rng rng(16);
  try {
    train_step(model, {tiny_pair()}, opt, 0.01, 0.01, RunConfig::tiny().training, rng);
    FAIL() << "expected a NaN error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNanLoss);
    EXPECT_NE(std::string(e.what()).find("refine_box"), std::string::npos);
  }
}

TEST(Trainer, LogRecordsCarryStepLrAndLossTerms) {
  TrainLogRecord r;
  r.step = 7;
  r.epoch = 1;
  r.lr = 0.005;
  r.loss.rpn_cls = 0.5;
  r.loss.total = 0.75;
  const auto j = nlohmann::json::parse(format_log_record(r, "abc"));
  EXPECT_EQ(j["step"], 7);
  EXPECT_DOUBLE_EQ(j["lr"].get<double>(), 0.005);
  EXPECT_DOUBLE_EQ(j["total"].get<double>(), 0.75);
  for (const char* key : {"rpn_cls", "rpn_reg", "refine_box", "refine_mask"}) EXPECT_TRUE(j.contains(key));
  EXPECT_EQ(j["config_hash"], "abc");
}
