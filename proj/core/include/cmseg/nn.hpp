#pragma once

#include <map>
#include <string>
#include <vector>

#include "cmseg/ops.hpp"
#include "cmseg/rng.hpp"
#include "cmseg/tensor.hpp"

namespace cmseg {

class WeightArchive;

enum class Mode { kTrain, kEval };

struct ForwardContext {
  Mode mode = Mode::kEval;
  // Use running statistics even in training mode.
  bool freeze_bn = false;
  float bn_momentum = 0.1F;
  float bn_eps = 1e-5F;
};

struct NamedParam {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

/// Ordered registry of named parameter handles. Layers keep their own
/// handles to the same tensors, so updates through the registry are seen by
/// the layers.
class ParamSet {
 public:
  Tensor add(const std::string& name, Tensor tensor, bool trainable);

  const std::vector<NamedParam>& items() const { return items_; }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;

  std::vector<Tensor> trainable() const;
  int64_t count() const;
  int64_t trainable_count() const;
  void zero_grad();

  WeightArchive to_archive() const;
  /// Copies every parameter with the given name prefix from the archive.
  /// Throws ArchiveError naming the first missing or mismatched tensor.
  void load(const WeightArchive& archive, const std::string& prefix = "");

 private:
  std::vector<NamedParam> items_;
  std::map<std::string, size_t> index_;
};

/// He-uniform fan-in initialisation: U(-b, b), b = sqrt(6 / fan_in).
Tensor he_uniform(Shape shape, int64_t fan_in, Rng& rng);

struct ConvUnitSpec {
  int64_t in = 0;
  int64_t out = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
  bool batchnorm = true;
  bool relu6 = true;
};

/// Convolution optionally followed by batchnorm and ReLU6. Registers
/// "<prefix>.w", "<prefix>.b" and, with batchnorm, "<prefix>.bn_mean",
/// "<prefix>.bn_var", "<prefix>.bn_scale", "<prefix>.bn_shift".
class ConvUnit {
 public:
  ConvUnit() = default;
  ConvUnit(ParamSet& params, const std::string& prefix, const ConvUnitSpec& spec, Rng& rng);

  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  const ConvUnitSpec& spec() const { return spec_; }

 private:
  ConvUnitSpec spec_;
  ConvParams conv_;
  Tensor bn_mean_, bn_var_, bn_scale_, bn_shift_;
};

struct InvertedResidualSpec {
  int64_t in = 0;
  int64_t out = 0;
  int expansion = 1;
  int stride = 1;

  bool has_skip() const { return stride == 1 && in == out; }
};

/// MobileNet-v2 inverted residual block: 1x1 expand (omitted when the
/// expansion factor is 1), 3x3 depthwise, 1x1 linear projection, and an
/// identity skip when shapes allow.
class InvertedResidual {
 public:
  InvertedResidual() = default;
  InvertedResidual(ParamSet& params, const std::string& prefix, const InvertedResidualSpec& spec,
                   Rng& rng);

  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  const InvertedResidualSpec& spec() const { return spec_; }

 private:
  InvertedResidualSpec spec_;
  bool has_expand_ = false;
  ConvUnit expand_, depthwise_, project_;
};

/// Rounds c * multiplier to the nearest multiple of 4 (at least 4), never
/// dropping more than 10% below the target.
int64_t scale_channels(int64_t channels, float multiplier);

}  // namespace cmseg
