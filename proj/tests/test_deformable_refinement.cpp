#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "oracles.hpp"
#include "support.hpp"

using namespace siamattn;
using namespace siamattn::testing;

namespace {

Var<float> ramp(int c, int h, int w, double a, double bx, double by) {
  Tensor<float> t(Shape{c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t.at(ch, y, x) = static_cast<float>(a + ch + bx * x + by * y);
  return Var<float>(std::move(t));
}

RefinementConfig small_refinement() {
  RefinementConfig c;
  c.fusion_channels = 8;
  c.box_hidden = 16;
  c.mask_channels = 8;
  c.mask_pool = 4;
  c.mask_size = 16;
  c.mask_branch_size = 16;
  return c;
}

}  // namespace

TEST(DeformConv, ZeroOffsetEqualsPlainConvolution) {
  Rng rng(1);
  std::uniform_int_distribution<int> ch(1, 4), side(5, 11), pick(0, 1);
  for (int trial = 0; trial < 30; ++trial) {
    const int k = pick(rng) ? 3 : 1;
    const ConvGeometry g{1 + pick(rng), pick(rng) + pick(rng), pick(rng), 1 + pick(rng)};
    const int c = ch(rng), o = ch(rng), h = side(rng), w = side(rng);
    const auto x = random_var<float>({c, h, w}, rng);
    const auto wt = random_var<float>({o, c, k, k}, rng);
    const auto b = random_var<float>({o}, rng);
    const auto plain = conv2d(x, wt, b, g).value();
    const Var<float> off(Tensor<float>(Shape{2 * k * k, plain.dim(1), plain.dim(2)}));
    const auto deform = deform_conv2d(x, off, wt, b, g).value();
    ASSERT_LT(max_abs_diff(plain, deform), 1e-6f) << "trial " << trial;
  }
}

TEST(DeformConv, HalfPixelOffsetReadsRampMidpoint) {
  const auto x = ramp(1, 6, 6, 0, 1, 0);
  Tensor<float> w(Shape{1, 1, 3, 3});
  w[4] = 1;
  Tensor<float> off(Shape{18, 6, 6});
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 6; ++xx) off.at(2 * 4 + 1, y, xx) = 0.5f;
  const auto out = deform_conv2d(x, Var<float>(off), Var<float>(w), Var<float>(Tensor<float>(Shape{1})),
                                 ConvGeometry::same(3))
                       .value();
  for (int y = 0; y < 6; ++y)
    for (int xx = 0; xx < 5; ++xx) EXPECT_NEAR(out.at(0, y, xx), xx + 0.5, 1e-6);
  // Past the last column the right neighbour is padding.
  EXPECT_NEAR(out.at(0, 0, 5), 0.5 * 5, 1e-6);
}

TEST(DeformConv, GradientsIncludingOffsetsMatchFiniteDifferences) {
  auto build = [](auto& store) {
    using T = scalar_of<decltype(store)>;
    Rng rng(2);
    const auto g = ParamGroup::kHead;
    const auto x = store.create("x", g, random_tensor<T>({3, 6, 6}, rng));
    const auto off = store.create("offset", g, random_tensor<T>({18, 6, 6}, rng, -1.5, 1.5));
    const auto w = store.create("weight", g, random_tensor<T>({2, 3, 3, 3}, rng));
    const auto b = store.create("bias", g, random_tensor<T>({2}, rng));
    return [=] { return probe_loss(deform_conv2d(x, off, w, b, ConvGeometry::same(3))); };
  };
  const auto res = gradient_check(build, 12);
  EXPECT_EQ(res.tensors, 4);
  EXPECT_LT(res.max_error, 1e-3) << res.worst;
}

TEST(DeformRoiPool, ZeroOffsetsMatchAlignedPoolingOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto f = random_var<float>({3, 9, 11}, rng);
    const auto roi = random_roi(rng, 9, 11);
    const int bins = trial % 2 ? 4 : 3;
    const auto want = roi_align_oracle(f.value(), roi, bins, 2);
    const auto plain = deform_roi_pool(f, roi, Var<float>(), bins).value();
    const auto zero = deform_roi_pool(f, roi, Var<float>(Tensor<float>(Shape{2, bins, bins})), bins).value();
    for (std::size_t i = 0; i < want.size(); ++i) {
      ASSERT_NEAR(plain[i], want[i], 1e-5) << "trial " << trial;
      ASSERT_EQ(zero[i], plain[i]);
    }
  }
}

TEST(DeformRoiPool, ConstantFieldPoolsToConstant) {
  const Var<float> f(Tensor<float>(Shape{2, 8, 8}, 3.25f));
  const auto out = deform_roi_pool(f, FeatureRoi{1.2, 0.4, 6.3, 5.9}, Var<float>(), 4).value();
  for (float v : out.values()) EXPECT_NEAR(v, 3.25, 1e-6);
}

TEST(DeformRoiPool, AffineFieldPoolsToBinCentres) {
  const auto f = ramp(2, 10, 10, 0.5, 0.75, -0.25);
  const FeatureRoi roi{1.0, 2.0, 7.0, 8.5};
  const int bins = 4;
  const auto out = deform_roi_pool(f, roi, Var<float>(), bins).value();
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < bins; ++i)
      for (int j = 0; j < bins; ++j) {
        const double cy = roi.y1 + (i + 0.5) * roi.height() / bins;
        const double cx = roi.x1 + (j + 0.5) * roi.width() / bins;
        EXPECT_NEAR(out.at(c, i, j), 0.5 + c + 0.75 * cx - 0.25 * cy, 1e-5);
      }
}

TEST(DeformRoiPool, OffsetShiftsBinByGammaTimesRoiSize) {
  const auto f = ramp(1, 12, 12, 0, 1, 0);
  const FeatureRoi roi{2, 2, 6, 6};
  Tensor<float> off(Shape{2, 2, 2});
  off.at(1, 0, 1) = 1.f;
  const auto base = deform_roi_pool(f, roi, Var<float>(), 2).value();
  const auto moved = deform_roi_pool(f, roi, Var<float>(off), 2).value();
  EXPECT_NEAR(moved.at(0, 0, 1) - base.at(0, 0, 1), 0.1 * 4, 1e-5);
  EXPECT_EQ(moved.at(0, 1, 1), base.at(0, 1, 1));
}

TEST(DeformRoiPool, GradientsMatchFiniteDifferences) {
  auto build = [](auto& store) {
    using T = scalar_of<decltype(store)>;
    Rng rng(4);
    const auto f = store.create("feat", ParamGroup::kHead, random_tensor<T>({2, 7, 7}, rng));
    const auto off = store.create("offset", ParamGroup::kHead, random_tensor<T>({2, 3, 3}, rng));
    return [=] { return probe_loss(deform_roi_pool(f, FeatureRoi{0.7, 1.3, 5.2, 5.9}, off, 3, 2, T(0.3))); };
  };
  const auto res = gradient_check(build, 12);
  EXPECT_EQ(res.tensors, 2);
  EXPECT_LT(res.max_error, 1e-3) << res.worst;
}

TEST(DeformRoiPool, RejectsDegenerateRegionAndBadOffsets) {
  const Var<float> f(Tensor<float>(Shape{1, 5, 5}));
  EXPECT_THROW(deform_roi_pool(f, FeatureRoi{2, 2, 2, 4}, Var<float>(), 2), Error);
  EXPECT_THROW(deform_roi_pool(f, FeatureRoi{0, 0, 3, 3}, Var<float>(Tensor<float>(Shape{2, 3, 3})), 2), Error);
}

TEST(FusedFeatures, ZeroInputsGiveZeroOutputs) {
  Rng rng(5);
  ParameterStore<float> store;
  const auto cfg = small_refinement();
  RegionRefiner<float> ref(cfg, 8, 4, 6, store, rng);
  std::array<Var<float>, 3> corr;
  for (auto& c : corr) c = Var<float>(Tensor<float>(Shape{8, 5, 5}));
  const std::array<FeatureMap<float>, 2> low{FeatureMap<float>{Var<float>(Tensor<float>(Shape{4, 32, 32})), 2},
                                             FeatureMap<float>{Var<float>(Tensor<float>(Shape{6, 16, 16})), 4}};
  const auto pyr = ref.build_fused_features(corr, GridFrame{16, 8}, low);
  for (float v : pyr.box_branch.value().values()) EXPECT_EQ(v, 0.f);
  for (float v : pyr.mask_branch.value().values()) EXPECT_EQ(v, 0.f);
}

TEST(FusedFeatures, PaperShapes) {
  Rng rng(6);
  ParameterStore<float> store;
  RegionRefiner<float> ref(RefinementConfig{}, 256, 64, 256, store, rng);
  NoGradGuard ng;
  std::array<Var<float>, 3> corr;
  for (auto& c : corr) c = random_var<float>({256, 25, 25}, rng);
  const std::array<FeatureMap<float>, 2> low{FeatureMap<float>{random_var<float>({64, 128, 128}, rng), 2},
                                             FeatureMap<float>{random_var<float>({256, 64, 64}, rng), 4}};
  const auto pyr = ref.build_fused_features(corr, GridFrame{31.5, 8}, low);
  EXPECT_EQ(pyr.box_branch.shape(), (Shape{256, 25, 25}));
  EXPECT_EQ(pyr.mask_branch.shape(), (Shape{256, 64, 64}));
  EXPECT_DOUBLE_EQ(pyr.mask_frame.stride, 25.0 * 8 / 64);
}

TEST(FusedFeatures, StagesContributeAdditively) {
  Rng rng(7);
  ParameterStore<float> store;
  RegionRefiner<float> ref(small_refinement(), 8, 4, 6, store, rng);
  std::array<Var<float>, 3> corr;
  for (auto& c : corr) c = random_var<float>({8, 5, 5}, rng);
  const std::array<FeatureMap<float>, 2> low{FeatureMap<float>{random_var<float>({4, 32, 32}, rng), 2},
                                             FeatureMap<float>{random_var<float>({6, 16, 16}, rng), 4}};
  const std::array<FeatureMap<float>, 2> no_low{FeatureMap<float>{Var<float>(Tensor<float>(Shape{4, 32, 32})), 2},
                                                FeatureMap<float>{Var<float>(Tensor<float>(Shape{6, 16, 16})), 4}};
  const GridFrame frame{16, 8};
  const auto all = ref.build_fused_features(corr, frame, low);
  Tensor<float> box_sum(all.box_branch.shape()), mask_sum(all.mask_branch.shape());
  for (std::size_t s = 0; s < 3; ++s) {
    std::array<Var<float>, 3> one;
    for (std::size_t t = 0; t < 3; ++t) one[t] = t == s ? corr[t] : Var<float>(Tensor<float>(Shape{8, 5, 5}));
    const auto part = ref.build_fused_features(one, frame, no_low);
    box_sum = add(Var<float>(box_sum), part.box_branch).value();
    mask_sum = add(Var<float>(mask_sum), part.mask_branch).value();
  }
  std::array<Var<float>, 3> zeros;
  for (auto& z : zeros) z = Var<float>(Tensor<float>(Shape{8, 5, 5}));
  mask_sum = add(Var<float>(mask_sum), ref.build_fused_features(zeros, frame, low).mask_branch).value();
  EXPECT_LT(max_abs_diff(box_sum, all.box_branch.value()), 1e-5f);
  EXPECT_LT(max_abs_diff(mask_sum, all.mask_branch.value()), 1e-5f);
}

TEST(BoxHead, FourByFourInputGivesFourDeltas) {
  Rng rng(8);
  ParameterStore<float> store;
  RegionRefiner<float> ref(RefinementConfig{}, 256, 64, 256, store, rng);
  EXPECT_EQ(ref.box_head(random_var<float>({256, 4, 4}, rng)).shape(), (Shape{4, 1}));
  EXPECT_EQ(ref.box_hidden_layer(0).weight.shape(), (Shape{512, 256 * 16}));
  EXPECT_EQ(ref.box_hidden_layer(1).weight.shape(), (Shape{512, 512}));
  std::size_t head = 0;
  for (const auto& p : store.all())
    if (p.name.rfind("refine.box_head.", 0) == 0) head += p.var.value().size();
  EXPECT_EQ(head, 4096u * 512 + 512 + 512 * 512 + 512 + 512 * 4 + 4);
}

TEST(BoxHead, MatchesTwoLayerPerceptronOracle) {
  Rng rng(9);
  ParameterStore<float> store;
  RegionRefiner<float> ref(small_refinement(), 8, 4, 6, store, rng);
  Rng noise(10);
  randomize(store, noise, 0.3);
  const auto pooled = random_var<float>({8, 4, 4}, rng);
  using Mat = Eigen::MatrixXd;
  auto mat = [](const Var<float>& v) {
    const auto& t = v.value();
    Mat m(t.dim(0), t.dim(1));
    for (int i = 0; i < t.dim(0); ++i)
      for (int j = 0; j < t.dim(1); ++j) m(i, j) = t[static_cast<std::size_t>(i) * t.dim(1) + j];
    return m;
  };
  Eigen::VectorXd in(128);
  for (int i = 0; i < 128; ++i) in(i) = pooled.value()[static_cast<std::size_t>(i)];
  const auto& l1 = ref.box_hidden_layer(0);
  const auto& l2 = ref.box_hidden_layer(1);
  const auto& l3 = ref.box_output_layer();
  Eigen::VectorXd h1 = (mat(l1.weight) * in + mat(l1.bias)).cwiseMax(0.0);
  Eigen::VectorXd h2 = (mat(l2.weight) * h1 + mat(l2.bias)).cwiseMax(0.0);
  Eigen::VectorXd want = mat(l3.weight) * h2 + mat(l3.bias);
  const auto got = ref.box_head(pooled).value();
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(got[static_cast<std::size_t>(i)], want(i), 1e-5);
}

TEST(BoxHead, ZeroOutputLayerGivesZeroDelta) {
  Rng rng(11);
  ParameterStore<float> store;
  RegionRefiner<float> ref(small_refinement(), 8, 4, 6, store, rng);
  Var<float> w = ref.box_output_layer().weight;
  for (auto& v : w.mutable_value().values()) v = 0;
  const auto delta = ref.box_head(random_var<float>({8, 4, 4}, rng)).value();
  for (float v : delta.values()) EXPECT_EQ(v, 0.f);
}

TEST(MaskHead, PaperSizesGiveSixtyFourSquareProbabilities) {
  Rng rng(12);
  ParameterStore<float> store;
  RegionRefiner<float> ref(RefinementConfig{}, 256, 64, 256, store, rng);
  NoGradGuard ng;
  const auto logits = ref.mask_head(random_var<float>({256, 16, 16}, rng));
  EXPECT_EQ(logits.shape(), (Shape{1, 64, 64}));
  const auto probs = sigmoid(logits).value();
  for (float p : probs.values()) {
    EXPECT_GT(p, 0.f);
    EXPECT_LT(p, 1.f);
  }
}

TEST(MaskHead, ZeroFinalLayerGivesOneHalf) {
  Rng rng(13);
  ParameterStore<float> store;
  RegionRefiner<float> ref(small_refinement(), 8, 4, 6, store, rng);
  Var<float> w = ref.mask_output_layer().weight;
  for (auto& v : w.mutable_value().values()) v = 0;
  const auto probs = sigmoid(ref.mask_head(random_var<float>({8, 4, 4}, rng))).value();
  EXPECT_EQ(probs.shape(), (Shape{1, 16, 16}));
  for (float p : probs.values()) EXPECT_EQ(p, 0.5f);
}

TEST(RegionRefiner, GradientsThroughPoolingAndHeadsMatchFiniteDifferences) {
  auto build = [](auto& store) {
    using T = scalar_of<decltype(store)>;
    Rng rng(14);
    auto ref = std::make_shared<RegionRefiner<T>>(small_refinement(), 8, 4, 6, store, rng);
    std::array<Var<T>, 3> corr;
    for (int s = 0; s < 3; ++s)
      corr[static_cast<std::size_t>(s)] =
          store.create("input.corr" + std::to_string(s), ParamGroup::kHead, random_tensor<T>({8, 5, 5}, rng));
    const std::array<FeatureMap<T>, 2> low{
        FeatureMap<T>{store.create("input.low1", ParamGroup::kHead, random_tensor<T>({4, 32, 32}, rng)), 2},
        FeatureMap<T>{store.create("input.low2", ParamGroup::kHead, random_tensor<T>({6, 16, 16}, rng)), 4}};
    Rng noise(15);
    randomize(store, noise, 0.4);
    return [=] {
      const auto pyr = ref->build_fused_features(corr, GridFrame{16, 8}, low);
      const auto out = ref->refine(pyr, Box{33.3, 29.1, 27.7, 35.2}, 64, true);
      return add(probe_loss(out.box_delta, 1), probe_loss(out.mask_logits, 2));
    };
  };
  const auto res = gradient_check(build, 6);
  EXPECT_GT(res.tensors, 25);
  EXPECT_LT(res.max_error, 1e-3) << res.worst;
}
