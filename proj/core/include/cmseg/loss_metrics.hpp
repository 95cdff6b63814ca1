#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cmseg/tensor.hpp"

namespace cmseg {

inline constexpr float kProbClamp = 1e-7F;
inline constexpr float kDiceSmooth = 1.0F;

/// Mean binary cross-entropy; probabilities clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& prob, const Tensor& gt);
/// 1 - (2 sum(p g) + 1) / (sum p + sum g + 1).
Tensor dice_loss(const Tensor& prob, const Tensor& gt);
/// bce + dice, equal weights.
Tensor total_loss(const Tensor& prob, const Tensor& gt);

struct Confusion {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const Confusion&) const = default;
};

struct Rates {
  double precision = 0.0;
  double recall = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
};

/// Pixel confusion of two binary masks with values in {0, 1}. Throws
/// ValueError on any other value and ShapeError on a size mismatch.
Confusion confusion(std::span<const uint8_t> pred, std::span<const uint8_t> gt);
Confusion confusion(const Tensor& pred, const Tensor& gt);

/// Empty denominators count as vacuous success (rate 1); F1 and IoU are 1
/// exactly when both masks are empty.
Rates rates(const Confusion& c);

struct ImageScore {
  std::string name;
  Confusion confusion;
  Rates rates;
};

struct EvalReport {
  std::vector<ImageScore> images;
  Rates mean;  // arithmetic means over images
  int64_t detected_count = 0;
  double f1_threshold = 0.5;
};

/// Number of images with F1 strictly above the threshold.
int64_t detection_count(std::span<const ImageScore> images, double f1_threshold = 0.5);
int64_t detection_count(std::span<const double> f1s, double f1_threshold = 0.5);

EvalReport make_report(std::vector<ImageScore> images, double f1_threshold = 0.5);

/// JSON document:
///   {"images": [{"name", "tp", "fp", "fn", "tn", "precision", "recall",
///                "specificity", "f1", "iou"}, ...],
///    "mean": {"precision", "recall", "specificity", "f1", "iou"},
///    "image_count", "detected_count", "f1_threshold"}
std::string report_to_json(const EvalReport& report);

}  // namespace cmseg
