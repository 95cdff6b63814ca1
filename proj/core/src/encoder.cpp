#include "cmseg/encoder.hpp"

#include <string>

namespace cmseg {

namespace {

struct Stage {
  int expansion;
  int64_t channels;  // unscaled; 0 means "use the pyramid tap width"
  int repeats;
  int stride;
  int tap;  // pyramid level produced by the last block of the stage, 0 = none
};

// MobileNet-v2 stages. The stem runs at stride 1 and the first stage at stride 2.
constexpr std::array<Stage, 7> kStages{{
    {1, 0, 1, 2, 2},
    {6, 0, 2, 2, 3},
    {6, 0, 3, 2, 4},
    {6, 64, 4, 2, 0},
    {6, 0, 3, 1, 5},
    {6, 160, 3, 2, 0},
    {6, 320, 1, 1, 0},
}};

constexpr int64_t kStemChannels = 32;

}  // namespace

void EncoderConfig::validate() const {
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0) {
    throw ValueError("encoder input size must be positive multiples of 32, got " +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  for (int64_t c : channels) {
    if (c <= 0) throw ValueError("encoder channels must be positive");
  }
  if (!(width_multiplier > 0.0F)) throw ValueError("width_multiplier must be positive");
}

int64_t EncoderConfig::level_channels(int level) const {
  if (level == 1) return scale_channels(kStemChannels, width_multiplier);
  if (level < 2 || level > 6) throw ValueError("pyramid level must be in 1..6");
  return scale_channels(channels[static_cast<size_t>(level - 2)], width_multiplier);
}

Encoder::Encoder(const EncoderConfig& config, ParamSet& params, Rng& rng) : config_(config) {
  config_.validate();
  const int64_t stem = config_.level_channels(1);
  stem_ = ConvUnit(params, "enc.block0.expand", {3, stem, 3, 1, 1, 1, 1, true, true}, rng);
  int64_t in = stem;
  int block = 1;
  for (const auto& stage : kStages) {
    const int64_t out = stage.channels ? scale_channels(stage.channels, config_.width_multiplier)
                                       : config_.level_channels(stage.tap);
    for (int r = 0; r < stage.repeats; ++r) {
      InvertedResidualSpec spec{in, out, stage.expansion, r == 0 ? stage.stride : 1};
      blocks_.emplace_back(params, "enc.block" + std::to_string(block), spec, rng);
      taps_.push_back(r == stage.repeats - 1 ? stage.tap : 0);
      in = out;
      ++block;
    }
  }
  head_ = ConvUnit(params, "enc.block" + std::to_string(block) + ".expand",
                   {in, config_.level_channels(6), 1, 1, 0, 1, 1, true, true}, rng);
}

Pyramid Encoder::encode(const Tensor& image, const ForwardContext& ctx) {
  if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != config_.height ||
      image.dim(3) != config_.width) {
    throw ShapeError("encoder expects (N,3," + std::to_string(config_.height) + "," +
                     std::to_string(config_.width) + "), got " + to_string(image.shape()));
  }
  Pyramid pyramid;
  Tensor x = stem_.forward(image, ctx);
  pyramid.levels[0] = x;
  for (size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i].forward(x, ctx);
    if (taps_[i]) pyramid.levels[static_cast<size_t>(taps_[i] - 1)] = x;
  }
  pyramid.levels[5] = head_.forward(x, ctx);
  return pyramid;
}

}  // namespace cmseg
