#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <utility>

#include "cmseg/nn.hpp"

namespace cmseg {

struct CoRConfig {
  /// Width of the Gaussian notch that suppresses self-similarity.
  float gamma = 4.0F;
  /// Number of similarity channels kept per site.
  int64_t k = 1;

  void validate(int64_t sites) const;
};

/// Reshapes a (C, h, w) or (1, C, h, w) tensor to (C, h*w) and scales every
/// column to unit L2 norm. All-zero columns stay zero.
Tensor feature_matrix(const Tensor& t);

/// Phi(s, t) = 1 - exp(-|s - t|^2 / (2 gamma^2)) over the h*w sites of an
/// h x w grid, sites numbered row-major. Returns an (h*w, h*w) tensor.
Tensor suppression_matrix(int64_t h, int64_t w, float gamma);

/// Self-correlation: cosine affinity between all site pairs, multiplied by
/// the suppression matrix, then the k largest values per site in descending
/// order. Input (C, h, w) -> (k, h, w), or (N, C, h, w) -> (N, k, h, w) with
/// each batch element handled independently. `phi` may carry a precomputed
/// suppression matrix for the same (h, w, gamma).
Tensor cor_forward(const Tensor& t, const CoRConfig& cfg, const Tensor& phi = Tensor());

enum class AttentionCombine { kAdd, kMul };

struct VrsaOptions {
  bool use_aspp = true;
  bool use_sam = true;
  AttentionCombine combine = AttentionCombine::kAdd;
};

/// Dilation rates of the four atrous branches.
inline constexpr std::array<int, 4> kAsppDilations{4, 8, 12, 16};

/// ASPP (four dilated 3x3 branches fused by a 1x1 convolution) followed by
/// spatial attention: B = K~ + sigmoid(conv7x7([mean_c K~, max_c K~])).
///
/// Parameters: "<prefix>.aspp{0..3}.*", "<prefix>.fuse.*", "<prefix>.sam.{w,b}";
/// with use_aspp off, a single 1x1 "<prefix>.adapter.*" replaces the ASPP.
class Vrsa {
 public:
  Vrsa() = default;
  Vrsa(ParamSet& params, const std::string& prefix, int64_t in_channels, int64_t out_channels,
       const VrsaOptions& options, Rng& rng);

  Tensor forward(const Tensor& k, const ForwardContext& ctx);
  /// Single-channel attention map of the last forward, for inspection.
  const Tensor& last_attention() const { return attention_; }

 private:
  VrsaOptions options_;
  std::array<ConvUnit, 4> branches_;
  ConvUnit fuse_;
  ConvUnit adapter_;
  ConvParams sam_;
  Tensor attention_;
};

struct CosaOptions {
  bool use_cor = true;
  VrsaOptions vrsa;
};

/// Correlation-assisted spatial attention for one pyramid level (2..5).
/// Level 2 skips the correlation step; levels 1 and 6 are rejected.
class Cosa {
 public:
  Cosa() = default;
  /// `channels` is C_i of the input level; cor.k fixes the correlation width.
  Cosa(ParamSet& params, int level, int64_t channels, int64_t out_channels, const CoRConfig& cor,
       const CosaOptions& options, Rng& rng);

  Tensor forward(const Tensor& t, const ForwardContext& ctx);

  int level() const { return level_; }
  bool correlates() const { return correlate_; }
  int64_t out_channels() const { return out_channels_; }

 private:
  int level_ = 0;
  bool correlate_ = false;
  int64_t out_channels_ = 0;
  CoRConfig cor_;
  Vrsa vrsa_;
  struct PhiCache {
    std::mutex mutex;
    std::map<std::pair<int64_t, int64_t>, Tensor> entries;
  };
  std::shared_ptr<PhiCache> phi_cache_ = std::make_shared<PhiCache>();
};

}  // namespace cmseg
