#include <gtest/gtest.h>

#include <cmath>
#include <json.hpp>

#include "cmseg/gradcheck.hpp"
#include "cmseg/loss_metrics.hpp"
#include "oracles.hpp"

using namespace cmseg;
using cmseg::testing::random_tensor;

namespace {

double bce_oracle(const std::vector<float>& p, const std::vector<float>& g) {
  double sum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p[i]), 1e-7, 1.0 - 1e-7);
    sum -= g[i] * std::log(q) + (1.0 - g[i]) * std::log(1.0 - q);
  }
  return sum / static_cast<double>(p.size());
}

double dice_oracle(const std::vector<float>& p, const std::vector<float>& g) {
  double pg = 0.0;
  double sp = 0.0;
  double sg = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    pg += static_cast<double>(p[i]) * g[i];
    sp += p[i];
    sg += g[i];
  }
  return 1.0 - (2.0 * pg + 1.0) / (sp + sg + 1.0);
}

Tensor binary_tensor(Shape shape, Rng& rng, double density) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform() < density ? 1.0F : 0.0F;
  return t;
}

}  // namespace

TEST(LossTest, BceAtHalfIsLnTwo) {
  Rng rng(1);
  const Tensor g = binary_tensor({2, 1, 4, 4}, rng, 0.5);
  EXPECT_NEAR(bce_loss(Tensor({2, 1, 4, 4}, 0.5F), g).item(), std::log(2.0), 1e-6);
}

TEST(LossTest, BceMatchesOracleAndClamps) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor p = random_tensor({1, 1, 5, 7}, rng, 0.0F, 1.0F);
    const Tensor g = binary_tensor({1, 1, 5, 7}, rng, 0.3);
    EXPECT_NEAR(bce_loss(p, g).item(), bce_oracle(p.to_vector(), g.to_vector()), 1e-5);
  }
  const Tensor wrong({1, 1, 1, 2}, std::vector<float>{0.0F, 1.0F});
  const Tensor g({1, 1, 1, 2}, std::vector<float>{1.0F, 0.0F});
  EXPECT_NEAR(bce_loss(wrong, g).item(), -std::log(1e-7), 1e-2);
}

TEST(LossTest, DiceCases) {
  const Tensor ones({1, 1, 3, 3}, 1.0F);
  const Tensor zeros({1, 1, 3, 3}, 0.0F);
  EXPECT_NEAR(dice_loss(ones, ones).item(), 0.0, 1e-7);
  EXPECT_NEAR(dice_loss(zeros, zeros).item(), 0.0, 1e-7);
  EXPECT_NEAR(dice_loss(zeros, ones).item(), 1.0 - 1.0 / 10.0, 1e-6);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor p = random_tensor({2, 1, 4, 6}, rng, 0.0F, 1.0F);
    const Tensor g = binary_tensor({2, 1, 4, 6}, rng, 0.4);
    EXPECT_NEAR(dice_loss(p, g).item(), dice_oracle(p.to_vector(), g.to_vector()), 1e-5);
    EXPECT_NEAR(total_loss(p, g).item(), bce_oracle(p.to_vector(), g.to_vector()) + dice_oracle(p.to_vector(), g.to_vector()),
                1e-5);
  }
}

TEST(LossTest, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  const Tensor g = binary_tensor({1, 1, 4, 4}, rng, 0.4);
  const Tensor p = random_tensor({1, 1, 4, 4}, rng, 0.1F, 0.9F);
  for (const auto& loss : {bce_loss, dice_loss, total_loss}) {
    const auto r = gradcheck([&](const std::vector<Tensor>& v) { return loss(v[0], g); }, {p}, 1e-3, 4);
    EXPECT_LT(r.rel_error, 1e-3);
  }
}

TEST(LossTest, ShapeMismatchThrows) {
  EXPECT_THROW(bce_loss(Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 3})), ShapeError);
  EXPECT_THROW(dice_loss(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 2})), ShapeError);
}

TEST(MetricsTest, ConfusionFixture) {
  std::vector<uint8_t> pred;
  std::vector<uint8_t> gt;
  const auto push = [&](int n, uint8_t p, uint8_t g) {
    for (int i = 0; i < n; ++i) {
      pred.push_back(p);
      gt.push_back(g);
    }
  };
  push(6, 1, 1);
  push(2, 1, 0);
  push(3, 0, 1);
  push(5, 0, 0);
  const Confusion c = confusion(pred, gt);
  EXPECT_EQ(c, (Confusion{6, 2, 3, 5}));
  const Rates r = rates(c);
  EXPECT_NEAR(r.precision, 0.75, 1e-4);
  EXPECT_NEAR(r.recall, 2.0 / 3.0, 1e-4);
  EXPECT_NEAR(r.f1, 0.7059, 1e-4);
  EXPECT_NEAR(r.iou, 0.5455, 1e-4);
  EXPECT_NEAR(r.specificity, 5.0 / 7.0, 1e-4);
}

TEST(MetricsTest, EmptyMasksAreVacuousSuccess) {
  const Rates r = rates(Confusion{0, 0, 0, 9});
  EXPECT_EQ(r.f1, 1.0);
  EXPECT_EQ(r.iou, 1.0);
  EXPECT_EQ(r.precision, 1.0);
  EXPECT_EQ(r.recall, 1.0);
  EXPECT_EQ(rates(Confusion{0, 3, 0, 6}).f1, 0.0);
  EXPECT_EQ(rates(Confusion{0, 0, 3, 6}).f1, 0.0);
}

TEST(MetricsTest, ConfusionRejectsBadInput) {
  const std::vector<uint8_t> a{0, 1, 2};
  const std::vector<uint8_t> b{0, 1, 1};
  const std::vector<uint8_t> c{0, 1};
  EXPECT_THROW(confusion(a, b), ValueError);
  EXPECT_THROW(confusion(b, c), ShapeError);
}

TEST(MetricsTest, ConfusionMatchesBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = binary_tensor({1, 1, 9, 11}, rng, 0.3);
    const Tensor g = binary_tensor({1, 1, 9, 11}, rng, 0.4);
    Confusion want;
    for (size_t i = 0; i < p.data().size(); ++i) {
      const bool pi = p.data()[i] > 0.5F;
      const bool gi = g.data()[i] > 0.5F;
      want.tp += pi && gi;
      want.fp += pi && !gi;
      want.fn += !pi && gi;
      want.tn += !pi && !gi;
    }
    EXPECT_EQ(confusion(p, g), want);
  }
}

TEST(MetricsTest, DetectionCountIsStrict) {
  const std::vector<double> f1s{0.9, 0.5, 0.51, 0.49, 0.0, 1.0, 0.5, 0.7, 0.2, 0.5000001};
  EXPECT_EQ(detection_count(f1s, 0.5), 5);
  EXPECT_EQ(detection_count(std::span<const double>{}, 0.5), 0);
}

TEST(MetricsTest, ReportMeansAndJson) {
  std::vector<ImageScore> images;
  images.push_back({"a", Confusion{6, 2, 3, 5}, rates(Confusion{6, 2, 3, 5})});
  images.push_back({"b", Confusion{0, 0, 0, 4}, rates(Confusion{0, 0, 0, 4})});
  const EvalReport report = make_report(images, 0.5);
  EXPECT_NEAR(report.mean.f1, (0.70588235 + 1.0) / 2.0, 1e-6);
  EXPECT_EQ(report.detected_count, 2);
  const auto j = nlohmann::json::parse(report_to_json(report));
  EXPECT_EQ(j["images"].size(), 2U);
  EXPECT_EQ(j["images"][0]["name"], "a");
  EXPECT_EQ(j["images"][0]["tp"], 6);
  EXPECT_EQ(j["image_count"], 2);
  EXPECT_EQ(j["detected_count"], 2);
  EXPECT_NEAR(j["mean"]["f1"].get<double>(), report.mean.f1, 1e-12);
}
