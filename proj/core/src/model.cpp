#include "cmseg/model.hpp"

#include <string>

#include "cmseg/weight_io.hpp"

namespace cmseg {

void ModelConfig::validate() const {
  encoder.validate();
  if (!(threshold > 0.0F && threshold < 1.0F)) throw ValueError("threshold must lie in (0, 1)");
  if (!(gamma > 0.0F)) throw ValueError("gamma must be positive");
  if (decoder_expansion < 1) throw ValueError("decoder_expansion must be >= 1");
  for (int level = 2; level <= 5; ++level) {
    const int64_t sites = (encoder.height >> (level - 1)) * (encoder.width >> (level - 1));
    const int64_t k = cor_k[static_cast<size_t>(level - 2)];
    if (k < 0 || k > sites) {
      throw ValueError("cor_k for level " + std::to_string(level) + " must be in [0, " +
                       std::to_string(sites) + "]");
    }
    if (cosa_out[static_cast<size_t>(level - 2)] < 0) throw ValueError("cosa_out must be >= 0");
  }
}

int64_t ModelConfig::cosa_channels(int level) const {
  const int64_t d = cosa_out.at(static_cast<size_t>(level - 2));
  return d > 0 ? d : encoder.level_channels(level);
}

int64_t ModelConfig::correlation_width(int level) const {
  const int64_t k = cor_k.at(static_cast<size_t>(level - 2));
  if (k > 0) return k;
  const int64_t sites = (encoder.height >> (level - 1)) * (encoder.width >> (level - 1));
  return std::min(encoder.level_channels(level), sites);
}

CMSegNet::CMSegNet(const ModelConfig& config)
    : config_(config), params_(std::make_unique<ParamSet>()) {
  config_.validate();
  Rng rng(config_.encoder.seed);
  encoder_ = Encoder(config_.encoder, *params_, rng);

  CosaOptions options;
  options.use_cor = config_.ablation.use_cor;
  options.vrsa.use_aspp = config_.ablation.use_aspp;
  options.vrsa.use_sam = config_.ablation.use_sam;
  options.vrsa.combine = config_.attention_combine;
  for (int level = 2; level <= 5; ++level) {
    CoRConfig cor{config_.gamma, config_.correlation_width(level)};
    cosa_[static_cast<size_t>(level - 2)] =
        Cosa(*params_, level, config_.encoder.level_channels(level), config_.cosa_channels(level), cor,
             options, rng);
  }

  // Decoder stages from coarse to fine.
  int64_t in = config_.encoder.level_channels(6);
  for (int level = 5; level >= 1; --level) {
    const int64_t out = config_.cosa_channels(std::max(level, 2));
    auto& stage = decoder_[static_cast<size_t>(level - 1)];
    stage.irb = config_.ablation.use_irb;
    const std::string id = std::to_string(level);
    if (stage.irb) {
      stage.block = InvertedResidual(*params_, "dec.irb" + id,
                                     {in, out, config_.decoder_expansion, 1}, rng);
    } else {
      stage.plain = ConvUnit(*params_, "dec.conv" + id, {in, out, 3, 1, 1, 1, 1, true, true}, rng);
    }
    stage.up.kernel = params_->add("dec.up" + id + ".w", he_uniform(Shape{out, out, 2, 2}, out * 4, rng), true);
    stage.up.bias = params_->add("dec.up" + id + ".b", Tensor(Shape{out}), true);
    stage.up.stride = 2;
    in = level >= 2 ? out + config_.cosa_channels(level) : out;
  }
  head_.kernel = params_->add("head.w", he_uniform(Shape{1, in, 1, 1}, in, rng), true);
  head_.bias = params_->add("head.b", Tensor(Shape{1}), true);
}

Pyramid CMSegNet::encode(const Tensor& image, const ForwardContext& ctx) {
  return encoder_.encode(image, ctx);
}

Tensor CMSegNet::decode(const Pyramid& pyramid, const ForwardContext& ctx) {
  Tensor r = pyramid[6];
  for (int level = 5; level >= 1; --level) {
    auto& stage = decoder_[static_cast<size_t>(level - 1)];
    Tensor h = stage.irb ? stage.block.forward(r, ctx) : stage.plain.forward(r, ctx);
    Tensor up = conv_transpose2d(h, stage.up);
    if (level == 1) {
      r = up;
      break;
    }
    Tensor b = cosa_[static_cast<size_t>(level - 2)].forward(pyramid[level], ctx);
    if (b.dim(2) != up.dim(2) || b.dim(3) != up.dim(3)) {
      throw ShapeError("decoder level " + std::to_string(level) + ": CoSA output " +
                       to_string(b.shape()) + " does not match upsampled " + to_string(up.shape()));
    }
    const std::array<Tensor, 2> parts{b, up};
    r = concat_channels(parts);
  }
  return conv2d(r, head_);
}

Tensor CMSegNet::logits(const Tensor& image, const ForwardContext& ctx) {
  return decode(encode(image, ctx), ctx);
}

Tensor CMSegNet::forward(const Tensor& image) {
  ForwardContext ctx;
  ctx.mode = Mode::kEval;
  return sigmoid(logits(image, ctx));
}

Tensor CMSegNet::predict_mask(const Tensor& image) { return predict_mask(image, config_.threshold); }

Tensor CMSegNet::predict_mask(const Tensor& image, float threshold) {
  NoGradGuard guard;
  return binarize(forward(image), threshold);
}

void CMSegNet::load(const WeightArchive& archive) { params_->load(archive); }

void CMSegNet::load_encoder(const WeightArchive& archive) { params_->load(archive, "enc."); }

WeightArchive CMSegNet::save() const { return params_->to_archive(); }

Tensor binarize(const Tensor& prob, float threshold) {
  Tensor out(prob.shape());
  auto dst = out.mutable_data();
  auto src = prob.data();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= threshold ? 1.0F : 0.0F;
  return out;
}

}  // namespace cmseg
