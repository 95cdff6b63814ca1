#include "cmseg/nn.hpp"

#include <cmath>

#include "cmseg/weight_io.hpp"

namespace cmseg {

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

Tensor ParamSet::add(const std::string& name, Tensor tensor, bool trainable) {
  if (contains(name)) throw ValueError("duplicate parameter name " + name);
  tensor.set_requires_grad(trainable);
  index_.emplace(name, items_.size());
  items_.push_back({name, tensor, trainable});
  return tensor;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("unknown parameter " + name);
  return items_[it->second].tensor;
}

std::vector<Tensor> ParamSet::trainable() const {
  std::vector<Tensor> out;
  for (const auto& p : items_) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

int64_t ParamSet::count() const {
  int64_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

int64_t ParamSet::trainable_count() const {
  int64_t n = 0;
  for (const auto& p : items_) {
    if (p.trainable) n += p.tensor.numel();
  }
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

WeightArchive ParamSet::to_archive() const {
  WeightArchive archive;
  for (const auto& p : items_) archive.add(p.name, p.tensor);
  return archive;
}

void ParamSet::load(const WeightArchive& archive, const std::string& prefix) {
  // Validate everything before touching any parameter.
  for (const auto& p : items_) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    if (!archive.contains(p.name)) throw ArchiveError(ArchiveErrc::kMissingEntry, p.name);
    const auto& e = archive.entry(p.name);
    if (e.shape != p.tensor.shape()) {
      throw ArchiveError(ArchiveErrc::kShapeMismatch, p.name + ": archive has " + to_string(e.shape) +
                                                          ", model expects " + to_string(p.tensor.shape()));
    }
  }
  for (auto& p : items_) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    const Tensor src = archive.tensor(p.name);
    std::copy(src.data().begin(), src.data().end(), p.tensor.mutable_data().begin());
  }
}

Tensor he_uniform(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const float bound = std::sqrt(6.0F / static_cast<float>(std::max<int64_t>(1, fan_in)));
  for (auto& v : t.mutable_data()) v = rng.uniform_float(-bound, bound);
  return t;
}

ConvUnit::ConvUnit(ParamSet& params, const std::string& prefix, const ConvUnitSpec& spec, Rng& rng)
    : spec_(spec) {
  if (spec.in % spec.groups != 0 || spec.out % spec.groups != 0) {
    throw ShapeError(prefix + ": channels not divisible by groups");
  }
  const int64_t per_group = spec.in / spec.groups;
  conv_.kernel = params.add(prefix + ".w",
                            he_uniform(Shape{spec.out, per_group, spec.kernel, spec.kernel},
                                       per_group * spec.kernel * spec.kernel, rng),
                            true);
  conv_.bias = params.add(prefix + ".b", Tensor(Shape{spec.out}), true);
  conv_.stride = spec.stride;
  conv_.padding = spec.padding;
  conv_.dilation = spec.dilation;
  conv_.groups = spec.groups;
  if (spec.batchnorm) {
    bn_mean_ = params.add(prefix + ".bn_mean", Tensor(Shape{spec.out}, 0.0F), false);
    bn_var_ = params.add(prefix + ".bn_var", Tensor(Shape{spec.out}, 1.0F), false);
    bn_scale_ = params.add(prefix + ".bn_scale", Tensor(Shape{spec.out}, 1.0F), true);
    bn_shift_ = params.add(prefix + ".bn_shift", Tensor(Shape{spec.out}, 0.0F), true);
  }
}

Tensor ConvUnit::forward(const Tensor& x, const ForwardContext& ctx) {
  Tensor y = conv2d(x, conv_);
  if (spec_.batchnorm) {
    if (ctx.mode == Mode::kTrain && !ctx.freeze_bn) {
      BatchStats stats;
      y = batchnorm_train(y, bn_scale_, bn_shift_, ctx.bn_eps, &stats);
      auto mean = bn_mean_.mutable_data();
      auto var = bn_var_.mutable_data();
      const float m = ctx.bn_momentum;
      for (size_t c = 0; c < mean.size(); ++c) {
        mean[c] = (1.0F - m) * mean[c] + m * stats.mean[c];
        var[c] = (1.0F - m) * var[c] + m * stats.var[c];
      }
    } else {
      y = batchnorm(y, bn_mean_, bn_var_, bn_scale_, bn_shift_, ctx.bn_eps);
    }
  }
  if (spec_.relu6) y = relu6(y);
  return y;
}

InvertedResidual::InvertedResidual(ParamSet& params, const std::string& prefix,
                                   const InvertedResidualSpec& spec, Rng& rng)
    : spec_(spec) {
  if (spec.stride != 1 && spec.stride != 2) throw ValueError(prefix + ": stride must be 1 or 2");
  if (spec.expansion < 1) throw ValueError(prefix + ": expansion must be >= 1");
  const int64_t hidden = spec.in * spec.expansion;
  has_expand_ = spec.expansion != 1;
  if (has_expand_) {
    expand_ = ConvUnit(params, prefix + ".expand", {spec.in, hidden, 1, 1, 0, 1, 1, true, true}, rng);
  }
  depthwise_ = ConvUnit(params, prefix + ".dw",
                        {hidden, hidden, 3, spec.stride, 1, 1, static_cast<int>(hidden), true, true}, rng);
  project_ = ConvUnit(params, prefix + ".project", {hidden, spec.out, 1, 1, 0, 1, 1, true, false}, rng);
}

Tensor InvertedResidual::forward(const Tensor& x, const ForwardContext& ctx) {
  if (x.rank() != 4 || x.dim(1) != spec_.in) {
    throw ShapeError("inverted residual expects " + std::to_string(spec_.in) + " channels, got " +
                     to_string(x.shape()));
  }
  Tensor h = has_expand_ ? expand_.forward(x, ctx) : x;
  h = depthwise_.forward(h, ctx);
  h = project_.forward(h, ctx);
  return spec_.has_skip() ? add(h, x) : h;
}

int64_t scale_channels(int64_t channels, float multiplier) {
  const double v = static_cast<double>(channels) * multiplier;
  int64_t out = std::max<int64_t>(4, static_cast<int64_t>(v + 2.0) / 4 * 4);
  if (static_cast<double>(out) < 0.9 * v) out += 4;
  return out;
}

}  // namespace cmseg
