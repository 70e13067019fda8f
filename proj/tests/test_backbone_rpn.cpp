#include <gtest/gtest.h>

#include "support.hpp"

using namespace siamattn;
using namespace siamattn::testing;

namespace {

// Output side of one conv layer, written out independently of ConvGeometry.
int conv_out(int s, int k, int stride, int pad_total, int dilation = 1) {
  return (s + pad_total - dilation * (k - 1) - 1) / stride + 1;
}

// Stem (7x7, s2, pad 3+2), then two strided 3x3 blocks (pad 1+0).
int traced_side(int s) {
  s = conv_out(s, 7, 2, 5);
  s = conv_out(s, 3, 2, 1);
  return conv_out(s, 3, 2, 1);
}

}  // namespace

TEST(Backbone, PaperCropsGiveFifteenAndThirtyOne) {
  Rng rng(1);
  ParameterStore<float> store;
  Backbone<float> bb(BackboneConfig::paper(), store, rng);
  NoGradGuard ng;
  const auto z = bb.extract_features(Var<float>(Tensor<float>(Shape{3, 127, 127}, 0.5f)));
  const auto x = bb.extract_features(Var<float>(Tensor<float>(Shape{3, 255, 255}, 0.5f)));
  for (int s = 2; s < 5; ++s) {
    EXPECT_EQ(z[s].data.shape(), (Shape{256, 15, 15}));
    EXPECT_EQ(x[s].data.shape(), (Shape{256, 31, 31}));
    EXPECT_EQ(x[s].stride, 8);
  }
  EXPECT_EQ(x[0].stride, 2);
  EXPECT_EQ(x[1].stride, 4);
  EXPECT_EQ(x[0].channels(), 64);
  EXPECT_EQ(x[1].channels(), 256);
}

TEST(Backbone, TinyModeSixtyFourGivesEight) {
  Rng rng(2);
  ParameterStore<float> store;
  Backbone<float> bb(BackboneConfig::tiny(), store, rng);
  const auto out = bb.extract_features(Var<float>(Tensor<float>(Shape{3, 64, 64}, 1.f)));
  EXPECT_EQ(out[4].data.shape(), (Shape{16, 8, 8}));
}

TEST(Backbone, StageSidesFollowStrideArithmetic) {
  Rng rng(3);
  ParameterStore<float> store;
  Backbone<float> bb(BackboneConfig::tiny(), store, rng);
  NoGradGuard ng;
  std::uniform_int_distribution<int> side(16, 140);
  for (int trial = 0; trial < 20; ++trial) {
    const int s = side(rng);
    const auto out = bb.forward(Var<float>(Tensor<float>(Shape{3, s, s}, 0.f)));
    ASSERT_EQ(traced_side(s), backbone_output_side(s)) << s;
    for (int k = 2; k < 5; ++k) {
      ASSERT_EQ(out[k].height(), traced_side(s)) << s;
      ASSERT_EQ(out[k].width(), traced_side(s)) << s;
    }
  }
}

TEST(Backbone, RejectsInvalidConfigAndCrops) {
  auto cfg = BackboneConfig::tiny();
  cfg.num_stages = 4;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = BackboneConfig::tiny();
  cfg.final_stride = 16;
  EXPECT_THROW(cfg.validate(), Error);

  Rng rng(4);
  ParameterStore<float> store;
  Backbone<float> bb(BackboneConfig::tiny(), store, rng);
  EXPECT_THROW(bb.extract_features(Var<float>(Tensor<float>(Shape{3, 64, 72}))), Error);
  EXPECT_THROW(bb.extract_features(Var<float>(Tensor<float>(Shape{3, 60, 60}))), Error);
  EXPECT_THROW(bb.extract_features(Var<float>(Tensor<float>(Shape{3, 8, 8}))), Error);
}

TEST(Backbone, ZeroImageGivesFiniteOutputAndRepeatsBitIdentically) {
  Rng rng(5);
  ParameterStore<float> store;
  Backbone<float> bb(BackboneConfig::tiny(), store, rng);
  const Var<float> zero(Tensor<float>(Shape{3, 64, 64}));
  const auto a = bb.extract_features(zero);
  for (int s = 0; s < 5; ++s) EXPECT_TRUE(a[s].data.value().all_finite());
  Rng in(6);
  const auto img = random_var<float>({3, 64, 64}, in, 0, 255);
  EXPECT_EQ(bb.extract_features(img)[4].data.value().storage(), bb.extract_features(img)[4].data.value().storage());
}

TEST(Backbone, InputGradientMatchesFiniteDifferences) {
  auto build = [](auto& store) {
    using T = scalar_of<decltype(store)>;
    Rng rng(7);
    auto bb = std::make_shared<Backbone<T>>(BackboneConfig::tiny(), store, rng);
    const auto crop = store.create("input", ParamGroup::kHead, random_tensor<T>({3, 32, 32}, rng));
    return [=] { return sum(bb->extract_features(crop)[4].data); };
  };
  const auto res = gradient_check(build, 10, 8, [](const std::string& n) { return n == "input"; });
  EXPECT_EQ(res.coords, 10);
  EXPECT_LT(res.max_error, 1e-3);
}

TEST(DepthwiseXcorr, OnesGiveKernelArea) {
  const Var<float> s(Tensor<float>(Shape{3, 6, 6}, 1.f)), k(Tensor<float>(Shape{3, 3, 3}, 1.f));
  const auto out = depthwise_xcorr(s, k);
  ASSERT_EQ(out.shape(), (Shape{3, 4, 4}));
  for (float v : out.value().values()) EXPECT_EQ(v, 9.f);
}

TEST(DepthwiseXcorr, PaperSizesGiveTwentyFive) {
  const Var<float> s(Tensor<float>(Shape{256, 31, 31}, 0.1f)), k(Tensor<float>(Shape{256, 7, 7}, 0.1f));
  EXPECT_EQ(depthwise_xcorr(s, k).shape(), (Shape{256, 25, 25}));
}

TEST(DepthwiseXcorr, MatchesSlidingDotProduct) {
  Rng rng(9);
  const auto s = random_var<float>({2, 5, 5}, rng), k = random_var<float>({2, 3, 3}, rng);
  const auto out = depthwise_xcorr(s, k).value();
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        double acc = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) acc += s.value().at(c, y + i, x + j) * k.value().at(c, i, j);
        EXPECT_NEAR(out.at(c, y, x), acc, 1e-5);
      }
}

TEST(DepthwiseXcorr, LinearInSearch) {
  Rng rng(10);
  const auto x = random_var<float>({4, 9, 9}, rng), y = random_var<float>({4, 9, 9}, rng);
  const auto k = random_var<float>({4, 4, 4}, rng);
  const float a = 0.7f, b = -1.3f;
  const auto lhs = depthwise_xcorr(add(scale(x, a), scale(y, b)), k).value();
  const auto rhs = add(scale(depthwise_xcorr(x, k), a), scale(depthwise_xcorr(y, k), b)).value();
  EXPECT_LT(max_abs_diff(lhs, rhs), 1e-5f);
}

TEST(DepthwiseXcorr, RejectsOversizedKernelAndChannelMismatch) {
  Rng rng(11);
  EXPECT_THROW(depthwise_xcorr(random_var<float>({2, 3, 3}, rng), random_var<float>({2, 4, 4}, rng)), Error);
  EXPECT_THROW(depthwise_xcorr(random_var<float>({2, 5, 5}, rng), random_var<float>({3, 3, 3}, rng)), Error);
}

TEST(RpnBlock, ChannelCountsAreTwoKAndFourK) {
  Rng rng(12);
  ParameterStore<float> store;
  RpnBlock<float> rpn(store, "rpn", 16, 5, rng);
  const auto out = rpn(random_var<float>({16, 4, 4}, rng), random_var<float>({16, 16, 16}, rng));
  EXPECT_EQ(out.cls.shape(), (Shape{10, 13, 13}));
  EXPECT_EQ(out.reg.shape(), (Shape{20, 13, 13}));
}

TEST(RpnBlock, ZeroedHeadsGiveUniformScoresAndFirstIndex) {
  Rng rng(13);
  ParameterStore<float> store;
  RpnBlock<float> rpn(store, "rpn", 16, 5, rng);
  for (int h = 0; h < 2; ++h) {
    Var<float> w = rpn.output_layer(h).weight;
    for (auto& v : w.mutable_value().values()) v = 0;
  }
  const auto out = rpn(random_var<float>({16, 4, 4}, rng), random_var<float>({16, 16, 16}, rng));
  const auto scores = foreground_scores(out.cls.value(), 5);
  for (double s : scores) EXPECT_EQ(s, scores[0]);
  const auto anchors = make_anchors(AnchorConfig{}, 13, 128);
  const auto best = select_best_proposal(out, anchors);
  EXPECT_EQ(best.index, 0u);
}

TEST(RpnBlock, ThreeStagesGiveIdenticalShapes) {
  Rng rng(14);
  ParameterStore<float> store;
  std::vector<RpnOutput<float>> outs;
  for (int s = 0; s < 3; ++s) {
    RpnBlock<float> rpn(store, "rpn" + std::to_string(s), 8, 5, rng);
    outs.push_back(rpn(random_var<float>({8, 4, 4}, rng), random_var<float>({8, 12, 12}, rng)));
  }
  for (const auto& o : outs) {
    EXPECT_EQ(o.cls.shape(), outs[0].cls.shape());
    EXPECT_EQ(o.reg.shape(), outs[0].reg.shape());
  }
}

TEST(RpnBlock, GradientsThroughXcorrAndHeadsMatchFiniteDifferences) {
  auto build = [](auto& store) {
    using T = scalar_of<decltype(store)>;
    Rng rng(15);
    auto rpn = std::make_shared<RpnBlock<T>>(store, "rpn", 8, 5, rng);
    const auto z = store.create("input.z", ParamGroup::kHead, random_tensor<T>({8, 3, 3}, rng));
    const auto x = store.create("input.x", ParamGroup::kHead, random_tensor<T>({8, 7, 7}, rng));
    Rng noise(16);
    randomize(store, noise, 0.5);
    return [=] {
      const auto out = (*rpn)(z, x);
      return add(probe_loss(out.cls, 3), probe_loss(out.reg, 4));
    };
  };
  const auto res = gradient_check(build, 8);
  EXPECT_GT(res.tensors, 15);
  EXPECT_LT(res.max_error, 1e-3) << res.worst;
}

namespace {
std::vector<RpnOutput<float>> random_stage_outputs(Rng& rng) {
  std::vector<RpnOutput<float>> o;
  for (int s = 0; s < 3; ++s) o.push_back({random_var<float>({10, 5, 5}, rng), random_var<float>({20, 5, 5}, rng)});
  return o;
}
Var<float> logits(float a, float b, float c) { return Var<float>(Tensor<float>(Shape{3}, std::vector<float>{a, b, c})); }
}  // namespace

TEST(FuseStages, DominantLogitSelectsThatStage) {
  Rng rng(17);
  const auto o = random_stage_outputs(rng);
  const auto f = fuse_stages<float>(o, logits(0, 1e6f, 0), logits(0, 0, 1e6f));
  EXPECT_LT(max_abs_diff(f.cls.value(), o[1].cls.value()), 1e-6f);
  EXPECT_LT(max_abs_diff(f.reg.value(), o[2].reg.value()), 1e-6f);
}

TEST(FuseStages, EqualLogitsGiveMean) {
  Rng rng(18);
  const auto o = random_stage_outputs(rng);
  const auto f = fuse_stages<float>(o, logits(2, 2, 2), logits(0, 0, 0));
  for (std::size_t i = 0; i < f.cls.value().size(); ++i) {
    const double mean = (o[0].cls.value()[i] + o[1].cls.value()[i] + o[2].cls.value()[i]) / 3.0;
    EXPECT_NEAR(f.cls.value()[i], mean, 1e-6);
  }
}

TEST(FuseStages, MatchesDirectWeightedSum) {
  Rng rng(19);
  const auto o = random_stage_outputs(rng);
  const double a = 0.3, b = -1.1, c = 0.8;
  const auto f = fuse_stages<float>(o, logits(a, b, c), logits(c, a, b));
  const double z = std::exp(a) + std::exp(b) + std::exp(c);
  const double w[3] = {std::exp(a) / z, std::exp(b) / z, std::exp(c) / z};
  EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-12);
  for (std::size_t i = 0; i < f.cls.value().size(); ++i) {
    double s = 0;
    for (int k = 0; k < 3; ++k) s += w[k] * o[static_cast<std::size_t>(k)].cls.value()[i];
    EXPECT_NEAR(f.cls.value()[i], s, 1e-6);
  }
  for (std::size_t i = 0; i < f.reg.value().size(); ++i) {
    const double s = w[2] * o[0].reg.value()[i] + w[0] * o[1].reg.value()[i] + w[1] * o[2].reg.value()[i];
    EXPECT_NEAR(f.reg.value()[i], s, 1e-6);
  }
}

TEST(FuseStages, RejectsWrongStageCount) {
  Rng rng(20);
  auto o = random_stage_outputs(rng);
  o.pop_back();
  EXPECT_THROW(fuse_stages<float>(o, logits(0, 0, 0), logits(0, 0, 0)), Error);
}

TEST(Anchors, PaperGridHasFiveRatiosOverTwentyFiveSquared) {
  const auto a = make_anchors(AnchorConfig{}, 25, 255);
  EXPECT_EQ(a.count(), 25u * 25u * 5u);
  EXPECT_EQ(a.k, 5);
  for (const auto& b : a.boxes) EXPECT_TRUE(b.w > 0 && b.h > 0);
  // Centre cell sits on the crop centre; neighbours are one stride apart.
  const auto& c = a.boxes[static_cast<std::size_t>(a.flat_index(2, 12, 12))];
  EXPECT_DOUBLE_EQ(c.cx, 127.5);
  EXPECT_DOUBLE_EQ(c.cy, 127.5);
  EXPECT_DOUBLE_EQ(a.boxes[static_cast<std::size_t>(a.flat_index(2, 12, 13))].cx - c.cx, 8.0);
  EXPECT_NEAR(c.w, 64.0, 1e-12);
  const auto& tall = a.boxes[static_cast<std::size_t>(a.flat_index(4, 0, 0))];
  EXPECT_NEAR(tall.h / tall.w, 3.0, 1e-12);
}

TEST(AnchorLabels, IdenticalIsPositiveDisjointIsNegative) {
  AnchorSet set;
  set.k = 1;
  set.size = 1;
  const Box gt{50, 50, 20, 20};
  set.boxes = {gt, Box{150, 150, 20, 20}};
  const auto labels = label_anchors(set, gt);
  EXPECT_EQ(labels[0], AnchorLabel::kPositive);
  EXPECT_EQ(labels[1], AnchorLabel::kNegative);
  EXPECT_THROW(label_anchors(set, Box{0, 0, 0, 5}), Error);
}

TEST(AnchorLabels, OverlapOfPointFourFiveIsIgnored) {
  // gt [0,20]^2; anchor [d, 20+d] x [0, 20]: IoU = 20(20-d) / (800 - 20(20-d)).
  // IoU = 0.45 gives 20 - d = 0.45 * 800 / (1.45 * 20).
  const double overlap = 0.45 * 800 / (1.45 * 20);
  const double d = 20 - overlap;
  const Box gt = Box::from_corners(0, 0, 20, 20);
  const Box anchor = Box::from_corners(d, 0, 20 + d, 20);
  const double inter = overlap * 20, uni = 800 - inter;
  EXPECT_NEAR(inter / uni, 0.45, 1e-12);
  EXPECT_NEAR(iou(anchor, gt), 0.45, 1e-12);
  AnchorSet set;
  set.k = 1;
  set.size = 1;
  set.boxes = {anchor};
  EXPECT_EQ(label_anchors(set, gt)[0], AnchorLabel::kIgnore);
}

TEST(AnchorLabels, EveryAnchorGetsExactlyOneLabel) {
  const auto anchors = make_anchors(AnchorConfig{}, 25, 255);
  Rng rng(21);
  std::uniform_real_distribution<double> pos(60, 200), size(20, 120);
  for (int trial = 0; trial < 20; ++trial) {
    const Box gt{pos(rng), pos(rng), size(rng), size(rng)};
    const auto labels = label_anchors(anchors, gt);
    ASSERT_EQ(labels.size(), anchors.count());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const double v = iou(anchors.boxes[i], gt);
      const AnchorLabel want = v > 0.6 ? AnchorLabel::kPositive : v < 0.3 ? AnchorLabel::kNegative : AnchorLabel::kIgnore;
      ASSERT_EQ(labels[i], want);
    }
  }
}

TEST(BoxDeltas, EncodeDecodeRoundTrip) {
  Rng rng(22);
  std::uniform_real_distribution<double> pos(-100, 300), size(1, 200);
  for (int i = 0; i < 1000; ++i) {
    const Box box{pos(rng), pos(rng), size(rng), size(rng)};
    const Box anchor{pos(rng), pos(rng), size(rng), size(rng)};
    const Box back = decode(encode(box, anchor), anchor);
    ASSERT_NEAR(back.cx, box.cx, 1e-5 * std::max(1.0, std::abs(box.cx)));
    ASSERT_NEAR(back.cy, box.cy, 1e-5 * std::max(1.0, std::abs(box.cy)));
    ASSERT_NEAR(back.w, box.w, 1e-5 * box.w);
    ASSERT_NEAR(back.h, box.h, 1e-5 * box.h);
  }
}

TEST(SelectBestProposal, SpikeReturnsThatAnchorsDecodedBox) {
  const auto anchors = make_anchors(AnchorConfig{}, 5, 64);
  RpnOutput<float> out{Var<float>(Tensor<float>(Shape{10, 5, 5})), Var<float>(Tensor<float>(Shape{20, 5, 5}))};
  const int a = 3, y = 1, x = 4;
  out.cls.mutable_value().at(5 + a, y, x) = 20.f;
  out.reg.mutable_value().at(0 * 5 + a, y, x) = 0.25f;
  out.reg.mutable_value().at(3 * 5 + a, y, x) = 0.5f;
  const auto best = select_best_proposal(out, anchors);
  const std::size_t flat = static_cast<std::size_t>(anchors.flat_index(a, y, x));
  EXPECT_EQ(best.index, flat);
  const Box want = decode(BoxDelta{0.25, 0, 0, 0.5}, anchors.boxes[flat]);
  EXPECT_NEAR(best.box.cx, want.cx, 1e-6);
  EXPECT_NEAR(best.box.h, want.h, 1e-5);
  EXPECT_NEAR(best.score, 1.0, 1e-6);
}

TEST(SelectBestProposal, MatchesExhaustiveArgmax) {
  const auto anchors = make_anchors(AnchorConfig{}, 7, 96);
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    RpnOutput<float> out{random_var<float>({10, 7, 7}, rng, -3, 3), random_var<float>({20, 7, 7}, rng, -0.2, 0.2)};
    const auto scores = foreground_scores(out.cls.value(), 5);
    std::size_t want = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] > scores[want]) want = i;
    ASSERT_EQ(select_best_proposal(out, anchors).index, want);
  }
}
