#pragma once

#include <span>
#include <vector>

#include "cmseg/tensor.hpp"

namespace cmseg {

/// Convolution parameters. The kernel is (out_ch, in_ch / groups, kh, kw)
/// for conv2d. conv_transpose2d reuses the same layout and is the
/// adjoint of conv2d with that kernel: its input has kernel.dim(0) channels and its output kernel.dim(1) * groups.
struct ConvParams {
  Tensor kernel;
  Tensor bias;  // optional; undefined means no bias
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

/// Output extent of a convolution along one axis.
int64_t conv_output_size(int64_t in, int64_t kernel, int stride, int padding, int dilation);
/// Output extent of a transposed convolution along one axis.
int64_t conv_transpose_output_size(int64_t in, int64_t kernel, int stride, int padding,
                                   int dilation);

Tensor conv2d(const Tensor& x, const ConvParams& p);
Tensor conv_transpose2d(const Tensor& x, const ConvParams& p);

enum class Activation { kRelu6, kSigmoid };

Tensor activation(const Tensor& x, Activation mode);
Tensor relu6(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Per-channel affine normalisation with supplied statistics (inference
/// form). mean and var are treated as constants; scale and shift are
/// differentiable.
Tensor batchnorm(const Tensor& x, const Tensor& mean, const Tensor& var, const Tensor& scale,
                 const Tensor& shift, float eps);

struct BatchStats {
  std::vector<float> mean;
  std::vector<float> var;  // unbiased
};

/// Batchnorm using statistics of the current batch over (N, H, W). Gradients
/// flow through the statistics. The batch statistics are written to *stats
/// when non-null.
Tensor batchnorm_train(const Tensor& x, const Tensor& scale, const Tensor& shift, float eps,
                       BatchStats* stats);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Concatenates rank-4 tensors along the channel axis.
Tensor concat_channels(std::span<const Tensor> xs);
Tensor slice_channels(const Tensor& x, int64_t begin, int64_t count);

/// Selects batch element n of a rank-4 tensor as a (1, C, H, W) tensor.
Tensor select_batch(const Tensor& x, int64_t n);
/// Stacks (1, C, H, W) tensors (or any rank-4 tensors) along the batch axis.
Tensor concat_batch(std::span<const Tensor> xs);

/// Top-k along the channel axis of a (C, h, w) or (N, C, h, w) tensor,
/// descending, ties resolved towards the lower channel index.
Tensor topk_channels(const Tensor& x, int64_t k);

/// Shares storage; only the shape changes.
Tensor reshape(const Tensor& x, Shape shape);

/// Columns of a (C, P) matrix scaled to unit L2 norm. Zero columns stay zero.
Tensor normalize_columns(const Tensor& x, float eps = 1e-12F);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
/// x (N, C, H, W) plus / times a single-channel map m (N, 1, H, W).
Tensor add_channel_broadcast(const Tensor& x, const Tensor& m);
Tensor mul_channel_broadcast(const Tensor& x, const Tensor& m);
/// Mean and max over the channel axis, each (N, 1, H, W).
Tensor channel_mean(const Tensor& x);
Tensor channel_max(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace cmseg
