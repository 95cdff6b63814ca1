#include <gtest/gtest.h>

#include <cmath>

#include "cmseg/cosa.hpp"
#include "cmseg/gradcheck.hpp"
#include "cmseg/ops.hpp"
#include "oracles.hpp"

using namespace cmseg;
using cmseg::testing::cor_oracle;
using cmseg::testing::max_abs_diff;
using cmseg::testing::random_tensor;

TEST(FeatureMatrixTest, ReshapesAndNormalises) {
  Rng rng(1);
  const Tensor t = random_tensor({1, 3, 2, 4}, rng);
  const Tensor f = feature_matrix(t);
  ASSERT_EQ(f.shape(), (Shape{3, 8}));
  for (int s = 0; s < 8; ++s) {
    double norm = 0.0;
    double raw = 0.0;
    for (int c = 0; c < 3; ++c) {
      norm += static_cast<double>(f.data()[c * 8 + s]) * f.data()[c * 8 + s];
      raw += static_cast<double>(t.data()[c * 8 + s]) * t.data()[c * 8 + s];
    }
    EXPECT_NEAR(norm, 1.0, 1e-5);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(f.data()[c * 8 + s], t.data()[c * 8 + s] / std::sqrt(raw), 1e-6);
  }
}

TEST(SuppressionTest, KnownValueAndProperties) {
  const int64_t h = 6;
  const int64_t w = 7;
  const int64_t n = h * w;
  const Tensor phi = suppression_matrix(h, w, 4.0F);
  ASSERT_EQ(phi.shape(), (Shape{n, n}));
  const auto p = phi.data();
  EXPECT_NEAR(p[0 * n + (3 * w + 4)], 1.0 - std::exp(-25.0 / 32.0), 1e-6);
  EXPECT_NEAR(p[0 * n + (3 * w + 4)], 0.5422, 1e-4);
  for (int64_t s = 0; s < n; ++s) {
    EXPECT_EQ(p[s * n + s], 0.0F);
    for (int64_t t = 0; t < n; ++t) {
      EXPECT_EQ(p[s * n + t], p[t * n + s]);
      EXPECT_GE(p[s * n + t], 0.0F);
      EXPECT_LT(p[s * n + t], 1.0F);
    }
  }
  EXPECT_GT(suppression_matrix(1, 400, 4.0F).data()[399], 0.9999F);
  EXPECT_LT(suppression_matrix(1, 400, 4.0F).data()[399], 1.0F);
}

TEST(SuppressionTest, MonotoneInSquaredDistance) {
  const int64_t w = 8;
  const Tensor phi = suppression_matrix(8, w, 2.5F);
  const auto p = phi.data();
  const int64_t n = 64;
  for (int64_t a = 0; a < n; ++a) {
    for (int64_t b = 0; b < n; ++b) {
      const int64_t da = (a / w) * (a / w) + (a % w) * (a % w);
      const int64_t db = (b / w) * (b / w) + (b % w) * (b % w);
      if (da < db) EXPECT_LE(p[a], p[b]);
      if (da == db) EXPECT_EQ(p[a], p[b]);
    }
  }
}

TEST(SuppressionTest, RejectsBadArguments) {
  EXPECT_THROW(suppression_matrix(0, 3, 4.0F), ValueError);
  EXPECT_THROW(suppression_matrix(2, 3, 0.0F), ValueError);
}

TEST(CorForwardTest, MatchesBruteForceOracle) {
  Rng rng(3);
  const Tensor t = random_tensor({4, 3, 3}, rng);
  const Tensor k = cor_forward(t, CoRConfig{4.0F, 3});
  ASSERT_EQ(k.shape(), (Shape{3, 3, 3}));
  EXPECT_LT(max_abs_diff(k.data(), cor_oracle(t, 3, 4.0)), 1e-5);
  for (uint64_t seed = 0; seed < 50; ++seed) {
    Rng r(seed + 100);
    const int64_t c = r.uniform_int(1, 8);
    const int64_t h = r.uniform_int(1, 6);
    const int64_t w = r.uniform_int(1, 6);
    const int64_t kk = r.uniform_int(1, std::min(c, h * w));
    const float gamma = r.uniform_float(0.5F, 5.0F);
    const Tensor x = random_tensor({c, h, w}, r);
    EXPECT_LT(max_abs_diff(cor_forward(x, CoRConfig{gamma, kk}).data(), cor_oracle(x, kk, gamma)), 1e-5)
        << "seed " << seed;
  }
}

TEST(CorForwardTest, BatchElementsAreIndependent) {
  Rng rng(4);
  const Tensor a = random_tensor({1, 5, 4, 3}, rng);
  const Tensor b = random_tensor({1, 5, 4, 3}, rng);
  const std::array<Tensor, 2> both{a, b};
  const Tensor k = cor_forward(concat_batch(both), CoRConfig{4.0F, 5});
  EXPECT_EQ(select_batch(k, 0).to_vector(), cor_forward(a, CoRConfig{4.0F, 5}).to_vector());
  EXPECT_EQ(select_batch(k, 1).to_vector(), cor_forward(b, CoRConfig{4.0F, 5}).to_vector());
}

TEST(CorForwardTest, ConstantFeaturesGiveLargestSuppressionValues) {
  const int64_t h = 3;
  const int64_t w = 4;
  const Tensor t({2, h, w}, 0.7F);
  const Tensor k = cor_forward(t, CoRConfig{1.5F, 4});
  const Tensor phi = suppression_matrix(h, w, 1.5F);
  for (int64_t s = 0; s < h * w; ++s) {
    std::vector<float> row(phi.data().begin() + s * h * w, phi.data().begin() + (s + 1) * h * w);
    std::sort(row.begin(), row.end(), std::greater<>());
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(k.data()[j * h * w + s], row[j], 1e-6);
  }
}

TEST(CorForwardTest, SingleSiteIsZero) {
  Rng rng(5);
  const Tensor k = cor_forward(random_tensor({3, 1, 1}, rng), CoRConfig{4.0F, 1});
  EXPECT_EQ(k.to_vector(), std::vector<float>{0.0F});
}

TEST(CorForwardTest, ScaleInvariantPerSite) {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor t = random_tensor({6, 4, 5}, rng);
    Tensor scaled = t.clone();
    auto d = scaled.mutable_data();
    for (int s = 0; s < 20; ++s) {
      const float f = std::exp(rng.uniform_float(-4.0F, 4.0F));
      for (int c = 0; c < 6; ++c) d[c * 20 + s] *= f;
    }
    const CoRConfig cfg{4.0F, 6};
    EXPECT_LT(max_abs_diff(cor_forward(t, cfg).data(), cor_forward(scaled, cfg).data()), 1e-5);
  }
}

TEST(CorForwardTest, RejectsBadK) {
  Rng rng(6);
  const Tensor t = random_tensor({3, 2, 2}, rng);
  EXPECT_THROW(cor_forward(t, CoRConfig{4.0F, 0}), ValueError);
  EXPECT_THROW(cor_forward(t, CoRConfig{4.0F, 5}), ValueError);
}

TEST(CorForwardTest, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  const Tensor t = random_tensor({1, 4, 3, 3}, rng);
  const auto r = gradcheck([](const std::vector<Tensor>& v) { return cor_forward(v[0], CoRConfig{2.0F, 3}); }, {t},
                           1e-3, 7);
  EXPECT_LT(r.rel_error, 1e-3);
}

namespace {

void zero_all(ParamSet& params) {
  for (const auto& p : params.items()) {
    Tensor t = p.tensor;
    const bool var = p.name.ends_with("bn_var");
    for (auto& v : t.mutable_data()) v = var ? 1.0F : 0.0F;
  }
}

}  // namespace

TEST(VrsaTest, ZeroInputAndWeightsGiveHalf) {
  ParamSet params;
  Rng rng(8);
  Vrsa vrsa(params, "v", 3, 5, VrsaOptions{}, rng);
  zero_all(params);
  const Tensor b = vrsa.forward(Tensor({1, 3, 6, 6}), ForwardContext{});
  ASSERT_EQ(b.shape(), (Shape{1, 5, 6, 6}));
  for (float v : b.data()) EXPECT_FLOAT_EQ(v, 0.5F);
  for (float v : vrsa.last_attention().data()) EXPECT_FLOAT_EQ(v, 0.5F);
}

TEST(VrsaTest, AttentionInUnitInterval) {
  ParamSet params;
  Rng rng(9);
  Vrsa vrsa(params, "v", 4, 4, VrsaOptions{}, rng);
  const Tensor b = vrsa.forward(random_tensor({2, 4, 7, 7}, rng, -3.0F, 3.0F), ForwardContext{});
  EXPECT_EQ(b.shape(), (Shape{2, 4, 7, 7}));
  for (float v : vrsa.last_attention().data()) {
    EXPECT_GT(v, 0.0F);
    EXPECT_LT(v, 1.0F);
  }
}

TEST(VrsaTest, GradientMatchesFiniteDifferences) {
  for (uint64_t seed = 0; seed < 4; ++seed) {
    ParamSet params;
    Rng rng(seed + 10);
    Vrsa vrsa(params, "v", 8, 4, VrsaOptions{}, rng);
    for (const auto& p : params.items()) {
      if (!p.name.ends_with(".b") && !p.name.ends_with("bn_shift")) continue;
      Tensor t = p.tensor;
      for (auto& v : t.mutable_data()) v = rng.uniform_float(-0.2F, 0.2F);
    }
    const Tensor x = random_tensor({1, 8, 6, 6}, rng);
    const auto r = gradcheck(
        [&](const std::vector<Tensor>& v) { return vrsa.forward(v[0], ForwardContext{}); }, {x}, 1e-3, 10);
    EXPECT_LT(r.rel_error, 5e-3) << "seed " << seed;
  }
}

TEST(CosaTest, LevelRules) {
  ParamSet params;
  Rng rng(11);
  EXPECT_THROW(Cosa(params, 1, 4, 4, CoRConfig{4.0F, 4}, CosaOptions{}, rng), ValueError);
  EXPECT_THROW(Cosa(params, 6, 4, 4, CoRConfig{4.0F, 4}, CosaOptions{}, rng), ValueError);
  EXPECT_FALSE(Cosa(params, 2, 4, 4, CoRConfig{4.0F, 4}, CosaOptions{}, rng).correlates());
  EXPECT_TRUE(Cosa(params, 3, 4, 4, CoRConfig{4.0F, 4}, CosaOptions{}, rng).correlates());
}

TEST(CosaTest, LevelTwoNeverAllocatesAffinity) {
  ParamSet params;
  Rng rng(12);
  Cosa cosa(params, 2, 4, 4, CoRConfig{4.0F, 4}, CosaOptions{}, rng);
  const Tensor t = random_tensor({1, 4, 64, 64}, rng);
  AllocationProbe probe;
  const Tensor b = cosa.forward(t, ForwardContext{});
  EXPECT_EQ(b.shape(), (Shape{1, 4, 64, 64}));
  EXPECT_LT(probe.largest(), 4096LL * 4096LL);
}

TEST(CosaTest, LevelThreeAffinityIsSitesSquared) {
  ParamSet params;
  Rng rng(13);
  Cosa cosa(params, 3, 6, 6, CoRConfig{4.0F, 6}, CosaOptions{}, rng);
  const Tensor t = random_tensor({1, 6, 64, 64}, rng);
  NoGradGuard guard;
  AllocationProbe probe;
  const Tensor b = cosa.forward(t, ForwardContext{});
  EXPECT_EQ(b.shape(), (Shape{1, 6, 64, 64}));
  EXPECT_GE(probe.largest(), 4096LL * 4096LL);
}
