#include "cmseg/loss_metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "cmseg/autograd.hpp"
#include "cmseg/ops.hpp"

namespace cmseg {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": prediction " + to_string(a.shape()) + " vs ground truth " +
                     to_string(b.shape()));
  }
}

}  // namespace

Tensor bce_loss(const Tensor& prob, const Tensor& gt) {
  require_same(prob, gt, "bce_loss");
  const auto p = prob.data();
  const auto g = gt.data();
  const auto n = static_cast<double>(p.size());
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p[i]), double{kProbClamp}, 1.0 - kProbClamp);
    acc -= g[i] * std::log(q) + (1.0 - g[i]) * std::log(1.0 - q);
  }
  auto out = detail::allocate(1, static_cast<float>(acc / n));
  return detail::make_result("bce_loss", Shape{1}, std::move(out), {prob, gt},
                             [n](detail::Node& self) {
                               auto& pn = *self.inputs[0];
                               if (!pn.requires_grad) return;
                               const auto& pv = *pn.data;
                               const auto& gv = *self.inputs[1]->data;
                               auto& d = detail::grad_buffer(pn);
                               const double scale = self.grad[0] / n;
                               for (size_t i = 0; i < pv.size(); ++i) {
                                 const double q = pv[i];
                                 if (q <= kProbClamp || q >= 1.0 - kProbClamp) continue;
                                 d[i] += static_cast<float>(scale * (-gv[i] / q + (1.0 - gv[i]) / (1.0 - q)));
                               }
                             });
}

Tensor dice_loss(const Tensor& prob, const Tensor& gt) {
  require_same(prob, gt, "dice_loss");
  const auto p = prob.data();
  const auto g = gt.data();
  double spg = 0.0;
  double sp = 0.0;
  double sg = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    spg += static_cast<double>(p[i]) * g[i];
    sp += p[i];
    sg += g[i];
  }
  const double num = 2.0 * spg + kDiceSmooth;
  const double den = sp + sg + kDiceSmooth;
  auto out = detail::allocate(1, static_cast<float>(1.0 - num / den));
  return detail::make_result("dice_loss", Shape{1}, std::move(out), {prob, gt},
                             [num, den](detail::Node& self) {
                               auto& pn = *self.inputs[0];
                               if (!pn.requires_grad) return;
                               const auto& gv = *self.inputs[1]->data;
                               auto& d = detail::grad_buffer(pn);
                               const double scale = self.grad[0] / (den * den);
                               for (size_t i = 0; i < d.size(); ++i) {
                                 d[i] += static_cast<float>(-scale * (2.0 * gv[i] * den - num));
                               }
                             });
}

Tensor total_loss(const Tensor& prob, const Tensor& gt) {
  return add(bce_loss(prob, gt), dice_loss(prob, gt));
}

Confusion confusion(std::span<const uint8_t> pred, std::span<const uint8_t> gt) {
  if (pred.size() != gt.size()) throw ShapeError("confusion: mask sizes differ");
  Confusion c;
  for (size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] > 1 || gt[i] > 1) throw ValueError("confusion: masks must be binary {0,1}");
    const bool p = pred[i] != 0;
    const bool g = gt[i] != 0;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

Confusion confusion(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) throw ShapeError("confusion: mask shapes differ");
  auto to_bits = [](const Tensor& t) {
    std::vector<uint8_t> bits;
    bits.reserve(static_cast<size_t>(t.numel()));
    for (float v : t.data()) {
      if (v != 0.0F && v != 1.0F) throw ValueError("confusion: masks must be binary {0,1}");
      bits.push_back(v == 1.0F ? 1 : 0);
    }
    return bits;
  };
  const auto p = to_bits(pred);
  const auto g = to_bits(gt);
  return confusion(std::span<const uint8_t>(p), std::span<const uint8_t>(g));
}

Rates rates(const Confusion& c) {
  auto ratio = [](int64_t num, int64_t den) {
    return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  Rates r;
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.recall = ratio(c.tp, c.tp + c.fn);
  r.specificity = ratio(c.tn, c.tn + c.fp);
  r.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  const double s = r.precision + r.recall;
  r.f1 = s == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / s;
  return r;
}

int64_t detection_count(std::span<const double> f1s, double f1_threshold) {
  return std::count_if(f1s.begin(), f1s.end(), [&](double f) { return f > f1_threshold; });
}

int64_t detection_count(std::span<const ImageScore> images, double f1_threshold) {
  return std::count_if(images.begin(), images.end(),
                       [&](const ImageScore& s) { return s.rates.f1 > f1_threshold; });
}

EvalReport make_report(std::vector<ImageScore> images, double f1_threshold) {
  EvalReport report;
  report.f1_threshold = f1_threshold;
  report.images = std::move(images);
  if (!report.images.empty()) {
    const auto n = static_cast<double>(report.images.size());
    for (const auto& s : report.images) {
      report.mean.precision += s.rates.precision / n;
      report.mean.recall += s.rates.recall / n;
      report.mean.specificity += s.rates.specificity / n;
      report.mean.f1 += s.rates.f1 / n;
      report.mean.iou += s.rates.iou / n;
    }
  }
  report.detected_count = detection_count(report.images, f1_threshold);
  return report;
}

std::string report_to_json(const EvalReport& report) {
  using nlohmann::ordered_json;
  auto rates_json = [](const Rates& r) {
    return ordered_json{{"f1", r.f1}, {"iou", r.iou}, {"precision", r.precision},
                        {"recall", r.recall}, {"specificity", r.specificity}};
  };
  ordered_json images = ordered_json::array();
  for (const auto& s : report.images) {
    ordered_json row{{"name", s.name},         {"tp", s.confusion.tp}, {"fp", s.confusion.fp},
                     {"fn", s.confusion.fn},   {"tn", s.confusion.tn}};
    const ordered_json r = rates_json(s.rates);
    for (const auto& [k, v] : r.items()) row[k] = v;
    images.push_back(std::move(row));
  }
  ordered_json doc{{"image_count", report.images.size()},
                   {"detected_count", report.detected_count},
                   {"f1_threshold", report.f1_threshold},
                   {"mean", rates_json(report.mean)},
                   {"images", std::move(images)}};
  return doc.dump(2) + "\n";
}

}  // namespace cmseg
