#include <gtest/gtest.h>

#include <cmath>

#include "cmseg/encoder.hpp"
#include "cmseg/gradcheck.hpp"
#include "cmseg/loss_metrics.hpp"
#include "cmseg/model.hpp"
#include "cmseg/ops.hpp"
#include "cmseg/weight_io.hpp"
#include "oracles.hpp"

using namespace cmseg;
using cmseg::testing::random_tensor;

namespace {

ModelConfig micro(int64_t size, uint64_t seed = 0) {
  ModelConfig cfg;
  cfg.encoder.height = size;
  cfg.encoder.width = size;
  cfg.encoder.width_multiplier = 0.25F;
  cfg.encoder.seed = seed;
  return cfg;
}

}  // namespace

TEST(InvertedResidualTest, ZeroWeightsPassResidualThrough) {
  ParamSet params;
  Rng rng(1);
  InvertedResidual block(params, "b", InvertedResidualSpec{4, 4, 1, 1}, rng);
  for (const auto& p : params.items()) {
    Tensor t = p.tensor;
    const float fill = p.name.ends_with("bn_var") || p.name.ends_with("bn_scale") ? 1.0F : 0.0F;
    for (auto& v : t.mutable_data()) v = fill;
  }
  const Tensor x = random_tensor({2, 4, 5, 5}, rng);
  EXPECT_EQ(block.forward(x, ForwardContext{}).to_vector(), x.to_vector());
}

TEST(InvertedResidualTest, StrideTwoHalves) {
  ParamSet params;
  Rng rng(2);
  InvertedResidual block(params, "b", InvertedResidualSpec{4, 6, 6, 2}, rng);
  EXPECT_EQ(block.forward(random_tensor({1, 4, 8, 8}, rng), ForwardContext{}).shape(), (Shape{1, 6, 4, 4}));
}

TEST(InvertedResidualTest, GradientMatchesFiniteDifferences) {
  ParamSet params;
  Rng rng(3);
  InvertedResidual block(params, "b", InvertedResidualSpec{3, 3, 2, 1}, rng);
  for (const auto& p : params.items()) {
    if (!p.name.ends_with(".b") && !p.name.ends_with("bn_shift")) continue;
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v = rng.uniform_float(-0.3F, 0.3F);
  }
  const auto r = gradcheck([&](const std::vector<Tensor>& v) { return block.forward(v[0], ForwardContext{}); },
                           {random_tensor({1, 3, 4, 4}, rng)}, 1e-3, 3);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(EncoderTest, FullWidthPyramidShapes) {
  ModelConfig cfg;
  CMSegNet net(cfg);
  NoGradGuard guard;
  const Pyramid p = net.encode(Tensor({1, 3, 256, 256}, 0.5F), ForwardContext{});
  EXPECT_EQ(p[2].shape(), (Shape{1, 16, 128, 128}));
  EXPECT_EQ(p[3].shape(), (Shape{1, 24, 64, 64}));
  EXPECT_EQ(p[4].shape(), (Shape{1, 32, 32, 32}));
  EXPECT_EQ(p[5].shape(), (Shape{1, 96, 16, 16}));
  EXPECT_EQ(p[6].shape(), (Shape{1, 1280, 8, 8}));
}

TEST(EncoderTest, WidthMultiplierScalesTopLevel) {
  EncoderConfig cfg;
  cfg.width_multiplier = 0.25F;
  EXPECT_EQ(cfg.level_channels(6), 320);
}

TEST(EncoderTest, RejectsMismatchedInput) {
  CMSegNet net(micro(64));
  EXPECT_THROW(net.forward(Tensor({1, 3, 32, 32})), ShapeError);
}

TEST(EncoderTest, ZeroImageIsFiniteAndDeterministic) {
  CMSegNet a(micro(64, 5));
  CMSegNet b(micro(64, 5));
  NoGradGuard guard;
  const Pyramid pa = a.encode(Tensor({1, 3, 64, 64}), ForwardContext{});
  const Pyramid pb = b.encode(Tensor({1, 3, 64, 64}), ForwardContext{});
  for (int level = 1; level <= 6; ++level) {
    for (float v : pa[level].data()) ASSERT_TRUE(std::isfinite(v));
    EXPECT_EQ(pa[level].to_vector(), pb[level].to_vector());
  }
}

TEST(ModelTest, SameSeedSameParameters) {
  CMSegNet a(micro(64, 9));
  CMSegNet b(micro(64, 9));
  CMSegNet c(micro(64, 10));
  EXPECT_EQ(serialize(a.save()), serialize(b.save()));
  EXPECT_NE(serialize(a.save()), serialize(c.save()));
}

TEST(ModelTest, LogitsShapeAndProbabilityRange) {
  CMSegNet net(micro(64));
  Rng rng(4);
  const Tensor x = random_tensor({2, 3, 64, 64}, rng, 0.0F, 1.0F);
  NoGradGuard guard;
  const Tensor p = net.forward(x);
  EXPECT_EQ(p.shape(), (Shape{2, 1, 64, 64}));
  for (float v : p.data()) {
    EXPECT_GE(v, 0.0F);
    EXPECT_LE(v, 1.0F);
  }
  EXPECT_EQ(net.forward(x).to_vector(), p.to_vector());
}

TEST(ModelTest, ArchiveRoundTripReproducesOutputs) {
  CMSegNet a(micro(64, 1));
  CMSegNet b(micro(64, 2));
  b.load(deserialize(serialize(a.save())));
  Rng rng(5);
  const Tensor x = random_tensor({1, 3, 64, 64}, rng, 0.0F, 1.0F);
  NoGradGuard guard;
  EXPECT_EQ(a.forward(x).to_vector(), b.forward(x).to_vector());
}

TEST(ModelTest, EncoderNamesAreStable) {
  CMSegNet net(micro(64));
  EXPECT_TRUE(net.params().contains("enc.block0.expand.w"));
  EXPECT_TRUE(net.params().contains("enc.block1.dw.w"));
  EXPECT_TRUE(net.params().contains("enc.block17.project.w"));
  EXPECT_TRUE(net.params().contains("enc.block18.expand.w"));
}

class AblationTest : public ::testing::TestWithParam<int> {};

TEST_P(AblationTest, ShapePreserved) {
  ModelConfig cfg = micro(64);
  const int bit = GetParam();
  cfg.ablation.use_cor = bit != 0;
  cfg.ablation.use_aspp = bit != 1;
  cfg.ablation.use_sam = bit != 2;
  cfg.ablation.use_irb = bit != 3;
  CMSegNet net(cfg);
  Rng rng(6);
  NoGradGuard guard;
  EXPECT_EQ(net.forward(random_tensor({1, 3, 64, 64}, rng, 0.0F, 1.0F)).shape(), (Shape{1, 1, 64, 64}));
}

INSTANTIATE_TEST_SUITE_P(Toggles, AblationTest, ::testing::Range(0, 4));

TEST(ModelTest, AblationParameterSets) {
  ModelConfig cfg = micro(64);
  cfg.ablation.use_irb = false;
  cfg.ablation.use_aspp = false;
  CMSegNet net(cfg);
  bool has_adapter = false;
  bool has_aspp = false;
  for (const auto& p : net.params().items()) {
    has_adapter |= p.name.find(".adapter.") != std::string::npos;
    has_aspp |= p.name.find(".aspp") != std::string::npos;
  }
  EXPECT_TRUE(has_adapter);
  EXPECT_FALSE(has_aspp);
}

TEST(ModelTest, WithoutCorNoQuadraticAllocation) {
  ModelConfig cfg = micro(256);
  const int64_t sites3 = 64 * 64;
  Rng rng(7);
  const Tensor x = random_tensor({1, 3, 256, 256}, rng, 0.0F, 1.0F);
  NoGradGuard guard;
  {
    cfg.ablation.use_cor = false;
    CMSegNet net(cfg);
    AllocationProbe probe;
    net.forward(x);
    EXPECT_LT(probe.largest(), sites3 * sites3);
  }
  {
    cfg.ablation.use_cor = true;
    CMSegNet net(cfg);
    AllocationProbe probe;
    net.forward(x);
    EXPECT_GE(probe.largest(), sites3 * sites3);
  }
}

TEST(BinarizeTest, ThresholdRules) {
  EXPECT_EQ(binarize(Tensor({1, 1, 2, 2}, 0.5F), 0.5F).to_vector(), std::vector<float>(4, 1.0F));
  EXPECT_EQ(binarize(Tensor({1, 1, 2, 2}, 0.0F), 0.5F).to_vector(), std::vector<float>(4, 0.0F));
  Rng rng(8);
  const Tensor p = random_tensor({1, 1, 16, 16}, rng, 0.0F, 1.0F);
  for (int i = 0; i < 10; ++i) {
    const auto lo = binarize(p, 0.1F * static_cast<float>(i)).to_vector();
    const auto hi = binarize(p, 0.1F * static_cast<float>(i) + 0.05F).to_vector();
    for (size_t j = 0; j < lo.size(); ++j) EXPECT_LE(hi[j], lo[j]);
  }
}

TEST(ModelTest, EndToEndGradientMatchesFiniteDifferences) {
  for (uint64_t seed = 0; seed < 2; ++seed) {
    CMSegNet net(micro(32, seed));
    Rng rng(seed + 50);
    for (const auto& p : net.params().items()) {
      if (!p.name.ends_with(".b") && !p.name.ends_with("bn_shift")) continue;
      Tensor t = p.tensor;
      for (auto& v : t.mutable_data()) v += rng.uniform_float(-0.1F, 0.1F);
    }
    Tensor x = random_tensor({2, 3, 32, 32}, rng, 0.0F, 1.0F);
    x.set_requires_grad(true);
    Tensor gt({2, 1, 32, 32});
    for (auto& v : gt.mutable_data()) v = rng.uniform() < 0.2 ? 1.0F : 0.0F;
    auto params = net.params().trainable();
    params.push_back(x);
    const auto r = directional_gradcheck(
        [&] { return total_loss(sigmoid(net.logits(x, ForwardContext{})), gt); }, params, 3e-4, seed);
    EXPECT_LT(r.rel_error, 1e-2) << "seed " << seed << " worst block " << r.worst_input;
  }
}
