#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cmseg/nn.hpp"

namespace cmseg {

struct EncoderConfig {
  int64_t height = 256;
  int64_t width = 256;
  /// Pyramid tap widths C2..C6 before the width multiplier.
  std::array<int64_t, 5> channels{16, 24, 32, 96, 1280};
  float width_multiplier = 1.0F;
  uint64_t seed = 0;

  /// Throws ValueError when the configuration is unusable.
  void validate() const;
  /// Scaled width of pyramid level i (1..6).
  int64_t level_channels(int level) const;
};

/// T1..T6. T1 is the stride-1 stem output; T_i for i >= 2 sits at stride
/// 2^(i-1).
struct Pyramid {
  std::array<Tensor, 6> levels;
  const Tensor& operator[](int level) const { return levels.at(static_cast<size_t>(level - 1)); }
};

/// MobileNet-v2 feature extractor.
///
/// Parameter names follow "enc.block{i}.{expand|dw|project}.{w|b|bn_*}".
/// block0 is the 3x3 stem convolution (stored as "enc.block0.expand"),
/// blocks 1..17 are the inverted residual blocks of the MobileNet-v2 table,
/// and block18 is the final 1x1 convolution producing T6 (stored as
/// "enc.block18.expand").
class Encoder {
 public:
  static constexpr int kBlockCount = 19;

  Encoder() = default;
  Encoder(const EncoderConfig& config, ParamSet& params, Rng& rng);

  Pyramid encode(const Tensor& image, const ForwardContext& ctx);
  const EncoderConfig& config() const { return config_; }

 private:
  EncoderConfig config_;
  ConvUnit stem_;
  std::vector<InvertedResidual> blocks_;
  std::vector<int> taps_;  // pyramid level emitted after each block, 0 = none
  ConvUnit head_;
};

}  // namespace cmseg
