#include "cmseg/cosa.hpp"

#include <cmath>
#include <string>

#include "cmseg/autograd.hpp"

namespace cmseg {

void CoRConfig::validate(int64_t sites) const {
  if (!(gamma > 0.0F)) throw ValueError("CoR gamma must be positive");
  if (k < 1 || k > sites) {
    throw ValueError("CoR k=" + std::to_string(k) + " outside [1, " + std::to_string(sites) + "]");
  }
}

Tensor feature_matrix(const Tensor& t) {
  Tensor x = t;
  if (x.rank() == 4) {
    if (x.dim(0) != 1) throw ShapeError("feature_matrix takes one batch element");
    x = reshape(x, Shape{x.dim(1), x.dim(2), x.dim(3)});
  }
  if (x.rank() != 3) throw ShapeError("feature_matrix expects (C,h,w), got " + to_string(t.shape()));
  return normalize_columns(reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2)}));
}

Tensor suppression_matrix(int64_t h, int64_t w, float gamma) {
  if (h < 1 || w < 1) throw ValueError("suppression_matrix needs a non-empty grid");
  if (!(gamma > 0.0F)) throw ValueError("suppression_matrix: gamma must be positive");
  const int64_t n = h * w;
  const double denom = 2.0 * static_cast<double>(gamma) * static_cast<double>(gamma);
  // Each distinct squared distance is evaluated once.
  const int64_t max_d2 = (h - 1) * (h - 1) + (w - 1) * (w - 1);
  std::vector<float> by_d2(static_cast<size_t>(max_d2 + 1));
  for (int64_t d2 = 0; d2 <= max_d2; ++d2) {
    const double v = -std::expm1(-static_cast<double>(d2) / denom);
    auto f = static_cast<float>(v);
    if (static_cast<double>(f) > v || f >= 1.0F) f = std::nextafter(f, 0.0F);
    by_d2[static_cast<size_t>(d2)] = f;
  }
  Tensor phi(Shape{n, n});
  auto out = phi.mutable_data();
  for (int64_t s = 0; s < n; ++s) {
    const int64_t sy = s / w;
    const int64_t sx = s % w;
    for (int64_t t = 0; t < n; ++t) {
      const int64_t dy = t / w - sy;
      const int64_t dx = t % w - sx;
      out[static_cast<size_t>(s * n + t)] = by_d2[static_cast<size_t>(dy * dy + dx * dx)];
    }
  }
  return phi;
}

namespace {

Tensor cor_single(const Tensor& t, const CoRConfig& cfg, const Tensor& phi) {
  // t is (C, h, w)
  const int64_t h = t.dim(1);
  const int64_t w = t.dim(2);
  const int64_t sites = h * w;
  Tensor f = feature_matrix(t);
  Tensor affinity = matmul(transpose(f), f);
  Tensor suppressed = mul(affinity, phi);
  // Row t of the symmetric matrix is channel t of site s.
  return topk_channels(reshape(suppressed, Shape{sites, h, w}), cfg.k);
}

}  // namespace

Tensor cor_forward(const Tensor& t, const CoRConfig& cfg, const Tensor& phi) {
  if (t.rank() != 3 && t.rank() != 4) {
    throw ShapeError("cor_forward expects (C,h,w) or (N,C,h,w), got " + to_string(t.shape()));
  }
  const bool batched = t.rank() == 4;
  const int64_t h = t.dim(batched ? 2 : 1);
  const int64_t w = t.dim(batched ? 3 : 2);
  cfg.validate(h * w);
  Tensor suppression = phi;
  if (!suppression.defined()) {
    suppression = suppression_matrix(h, w, cfg.gamma);
  } else if (suppression.shape() != Shape{h * w, h * w}) {
    throw ShapeError("cor_forward: suppression matrix shape " + to_string(suppression.shape()));
  }
  if (!batched) return cor_single(t, cfg, suppression);

  const int64_t c = t.dim(1);
  std::vector<Tensor> parts;
  parts.reserve(static_cast<size_t>(t.dim(0)));
  for (int64_t b = 0; b < t.dim(0); ++b) {
    Tensor k = cor_single(reshape(select_batch(t, b), Shape{c, h, w}), cfg, suppression);
    parts.push_back(reshape(k, Shape{1, cfg.k, h, w}));
  }
  return parts.size() == 1 ? parts[0] : concat_batch(parts);
}

Vrsa::Vrsa(ParamSet& params, const std::string& prefix, int64_t in_channels, int64_t out_channels,
           const VrsaOptions& options, Rng& rng)
    : options_(options) {
  if (options.use_aspp) {
    for (size_t i = 0; i < kAsppDilations.size(); ++i) {
      const int d = kAsppDilations[i];
      branches_[i] = ConvUnit(params, prefix + ".aspp" + std::to_string(i),
                              {in_channels, out_channels, 3, 1, d, d, 1, true, true}, rng);
    }
    fuse_ = ConvUnit(params, prefix + ".fuse",
                     {4 * out_channels, out_channels, 1, 1, 0, 1, 1, true, true}, rng);
  } else {
    adapter_ = ConvUnit(params, prefix + ".adapter",
                        {in_channels, out_channels, 1, 1, 0, 1, 1, true, true}, rng);
  }
  if (options.use_sam) {
    sam_.kernel = params.add(prefix + ".sam.w", he_uniform(Shape{1, 2, 7, 7}, 2 * 49, rng), true);
    sam_.bias = params.add(prefix + ".sam.b", Tensor(Shape{1}), true);
    sam_.padding = 3;
  }
}

Tensor Vrsa::forward(const Tensor& k, const ForwardContext& ctx) {
  Tensor features;
  if (options_.use_aspp) {
    std::vector<Tensor> branches;
    branches.reserve(branches_.size());
    for (auto& b : branches_) branches.push_back(b.forward(k, ctx));
    features = fuse_.forward(concat_channels(branches), ctx);
  } else {
    features = adapter_.forward(k, ctx);
  }
  if (!options_.use_sam) {
    attention_ = Tensor();
    return features;
  }
  const std::array<Tensor, 2> pooled{channel_mean(features), channel_max(features)};
  attention_ = sigmoid(conv2d(concat_channels(pooled), sam_));
  return options_.combine == AttentionCombine::kAdd ? add_channel_broadcast(features, attention_)
                                                    : mul_channel_broadcast(features, attention_);
}

Cosa::Cosa(ParamSet& params, int level, int64_t channels, int64_t out_channels, const CoRConfig& cor,
           const CosaOptions& options, Rng& rng)
    : level_(level), out_channels_(out_channels), cor_(cor) {
  if (level < 2 || level > 5) {
    throw ValueError("CoSA is defined for pyramid levels 2..5, got " + std::to_string(level));
  }
  correlate_ = options.use_cor && level >= 3;
  const int64_t in = correlate_ ? cor.k : channels;
  vrsa_ = Vrsa(params, "cosa." + std::to_string(level), in, out_channels, options.vrsa, rng);
}

Tensor Cosa::forward(const Tensor& t, const ForwardContext& ctx) {
  if (!correlate_) return vrsa_.forward(t, ctx);
  const std::pair<int64_t, int64_t> key{t.dim(2), t.dim(3)};
  Tensor phi;
  {
    std::lock_guard<std::mutex> lock(phi_cache_->mutex);
    auto it = phi_cache_->entries.find(key);
    if (it == phi_cache_->entries.end()) {
      it = phi_cache_->entries.emplace(key, suppression_matrix(key.first, key.second, cor_.gamma)).first;
    }
    phi = it->second;
  }
  return vrsa_.forward(cor_forward(t, cor_, phi), ctx);
}

}  // namespace cmseg
