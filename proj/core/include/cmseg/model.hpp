#pragma once

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "cmseg/cosa.hpp"
#include "cmseg/encoder.hpp"
#include "cmseg/nn.hpp"

namespace cmseg {

class WeightArchive;

/// Component switches mirroring the ablation study.
struct Ablation {
  bool use_cor = true;
  bool use_aspp = true;
  bool use_sam = true;
  bool use_irb = true;

  bool operator==(const Ablation&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  float gamma = 4.0F;
  /// Correlation width per level 2..5 (index 0 is level 2 and unused);
  /// 0 selects min(C_i, h_i * w_i).
  std::array<int64_t, 4> cor_k{0, 0, 0, 0};
  /// CoSA output width D_i per level 2..5; 0 selects C_i.
  std::array<int64_t, 4> cosa_out{0, 0, 0, 0};
  Ablation ablation;
  AttentionCombine attention_combine = AttentionCombine::kAdd;
  int decoder_expansion = 6;
  float threshold = 0.5F;
  bool freeze_bn = false;

  void validate() const;
  int64_t cosa_channels(int level) const;
  int64_t correlation_width(int level) const;
};

/// Copy-move segmentation network: MobileNet-v2 encoder, CoSA branches on
/// T2..T5 and an inverted-residual decoding path
///   R5 = B5 (+) up5(IRB5(T6)),  R_i = B_i (+) up_i(IRB_i(R_{i+1})),
///   R1 = up1(IRB1(R2)),  logits = conv1x1(R1)
/// where (+) is channel concatenation and up_i a stride-2 transposed conv.
///
/// Parameters live in one ParamSet under "enc.*", "cosa.{i}.*", "dec.*" and
/// "head.*".
class CMSegNet {
 public:
  /// Random initialisation from config.encoder.seed.
  explicit CMSegNet(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  ParamSet& params() { return *params_; }
  const ParamSet& params() const { return *params_; }

  Pyramid encode(const Tensor& image, const ForwardContext& ctx);
  /// Decoder over T2..T6 (T1 is ignored). Returns logits (N, 1, H, W).
  Tensor decode(const Pyramid& pyramid, const ForwardContext& ctx);
  Tensor logits(const Tensor& image, const ForwardContext& ctx);

  /// Sigmoid probabilities in evaluation mode.
  Tensor forward(const Tensor& image);
  /// 1 where probability >= threshold, else 0.
  Tensor predict_mask(const Tensor& image);
  Tensor predict_mask(const Tensor& image, float threshold);

  void load(const WeightArchive& archive);
  void load_encoder(const WeightArchive& archive);
  WeightArchive save() const;

 private:
  struct DecoderStage {
    bool irb = true;
    InvertedResidual block;
    ConvUnit plain;
    ConvParams up;
  };

  ModelConfig config_;
  std::unique_ptr<ParamSet> params_;
  Encoder encoder_;
  std::array<Cosa, 4> cosa_;              // levels 2..5
  std::array<DecoderStage, 5> decoder_;   // levels 1..5
  ConvParams head_;
};

/// Binarisation with the >= convention.
Tensor binarize(const Tensor& prob, float threshold);

}  // namespace cmseg
