#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

#include "cmseg/autograd.hpp"
#include "cmseg/ops.hpp"

namespace cmseg {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void require_rank(const Tensor& x, int64_t rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(x.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

void require_channel_vector(const Tensor& v, int64_t channels, const char* what) {
  if (!v.defined() || v.numel() != channels) {
    throw ShapeError(std::string("batchnorm: ") + what + " must have " + std::to_string(channels) +
                     " entries");
  }
}

float* grad_if_needed(detail::Node& n) {
  return n.requires_grad ? detail::grad_buffer(n).data() : nullptr;
}

}  // namespace

Tensor relu6(const Tensor& x) {
  auto in = x.data();
  auto out = detail::allocate(x.numel());
  std::transform(in.begin(), in.end(), out->begin(),
                 [](float v) { return std::min(std::max(v, 0.0F), 6.0F); });
  return detail::make_result("relu6", x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& xn = *self.inputs[0];
    auto& dx = detail::grad_buffer(xn);
    const auto& xv = *xn.data;
    for (size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0F && xv[i] < 6.0F) dx[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  auto in = x.data();
  auto out = detail::allocate(x.numel());
  std::transform(in.begin(), in.end(), out->begin(), [](float v) {
    if (v >= 0.0F) return 1.0F / (1.0F + std::exp(-v));
    const float e = std::exp(v);
    return e / (1.0F + e);
  });
  auto y = out;
  return detail::make_result("sigmoid", x.shape(), std::move(out), {x},
                             [y](detail::Node& self) {
                               auto& dx = detail::grad_buffer(*self.inputs[0]);
                               const auto& yv = *y;
                               for (size_t i = 0; i < yv.size(); ++i) {
                                 dx[i] += self.grad[i] * yv[i] * (1.0F - yv[i]);
                               }
                             });
}

Tensor activation(const Tensor& x, Activation mode) {
  return mode == Activation::kRelu6 ? relu6(x) : sigmoid(x);
}

Tensor batchnorm(const Tensor& x, const Tensor& mean, const Tensor& var, const Tensor& scale,
                 const Tensor& shift, float eps) {
  if (x.rank() < 2) throw ShapeError("batchnorm needs at least rank-2 input");
  const int64_t n = x.dim(0);
  const int64_t c = x.dim(1);
  const int64_t plane = x.numel() / std::max<int64_t>(1, n * c);
  require_channel_vector(mean, c, "mean");
  require_channel_vector(var, c, "var");
  require_channel_vector(scale, c, "scale");
  require_channel_vector(shift, c, "shift");
  for (float v : var.data()) {
    if (v < 0.0F) throw ValueError("batchnorm: negative variance");
  }
  std::vector<float> inv(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) inv[ch] = 1.0F / std::sqrt(var.data()[ch] + eps);
  auto out = detail::allocate(x.numel());
  const float* xd = x.data().data();
  const float* md = mean.data().data();
  const float* sd = scale.data().data();
  const float* bd = shift.data().data();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const float a = sd[ch] * inv[ch];
      const float off = bd[ch] - md[ch] * a;
      const float* src = xd + (b * c + ch) * plane;
      float* dst = out->data() + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * a + off;
    }
  }
  return detail::make_result(
      "batchnorm", x.shape(), std::move(out), {x, scale, shift, mean},
      [n, c, plane, inv](detail::Node& self) {
        auto& xn = *self.inputs[0];
        const float* xd = xn.data->data();
        const float* md = self.inputs[3]->data->data();
        const float* sd = self.inputs[1]->data->data();
        float* dx = grad_if_needed(xn);
        float* dscale = grad_if_needed(*self.inputs[1]);
        float* dshift = grad_if_needed(*self.inputs[2]);
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t ch = 0; ch < c; ++ch) {
            const float* g = self.grad.data() + (b * c + ch) * plane;
            const float* src = xd + (b * c + ch) * plane;
            float gs = 0.0F;
            float gxs = 0.0F;
            for (int64_t i = 0; i < plane; ++i) {
              gs += g[i];
              gxs += g[i] * (src[i] - md[ch]) * inv[ch];
            }
            if (dshift) dshift[ch] += gs;
            if (dscale) dscale[ch] += gxs;
            if (dx) {
              const float a = sd[ch] * inv[ch];
              float* d = dx + (b * c + ch) * plane;
              for (int64_t i = 0; i < plane; ++i) d[i] += g[i] * a;
            }
          }
        }
      });
}

Tensor batchnorm_train(const Tensor& x, const Tensor& scale, const Tensor& shift, float eps,
                       BatchStats* stats) {
  if (x.rank() < 2) throw ShapeError("batchnorm needs at least rank-2 input");
  const int64_t n = x.dim(0);
  const int64_t c = x.dim(1);
  const int64_t plane = x.numel() / std::max<int64_t>(1, n * c);
  const int64_t m = n * plane;
  require_channel_vector(scale, c, "scale");
  require_channel_vector(shift, c, "shift");
  if (m < 2) throw ShapeError("batchnorm_train needs more than one value per channel");
  const float* xd = x.data().data();
  std::vector<float> mu(static_cast<size_t>(c), 0.0F);
  std::vector<float> inv(static_cast<size_t>(c), 0.0F);
  std::vector<float> unbiased(static_cast<size_t>(c), 0.0F);
  for (int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int64_t b = 0; b < n; ++b) {
      const float* src = xd + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) s += src[i];
    }
    const double mean_v = s / static_cast<double>(m);
    double ss = 0.0;
    for (int64_t b = 0; b < n; ++b) {
      const float* src = xd + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const double d = src[i] - mean_v;
        ss += d * d;
      }
    }
    const double var = ss / static_cast<double>(m);
    mu[ch] = static_cast<float>(mean_v);
    inv[ch] = static_cast<float>(1.0 / std::sqrt(var + eps));
    unbiased[ch] = static_cast<float>(ss / static_cast<double>(m - 1));
  }
  if (stats) {
    stats->mean = mu;
    stats->var = unbiased;
  }
  auto xhat = std::make_shared<std::vector<float>>(static_cast<size_t>(x.numel()));
  auto out = detail::allocate(x.numel());
  const float* sd = scale.data().data();
  const float* bd = shift.data().data();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const int64_t base = (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const float h = (xd[base + i] - mu[ch]) * inv[ch];
        (*xhat)[base + i] = h;
        (*out)[base + i] = h * sd[ch] + bd[ch];
      }
    }
  }
  return detail::make_result(
      "batchnorm_train", x.shape(), std::move(out), {x, scale, shift},
      [n, c, plane, m, inv, xhat](detail::Node& self) {
        const float* sd = self.inputs[1]->data->data();
        float* dx = grad_if_needed(*self.inputs[0]);
        float* dscale = grad_if_needed(*self.inputs[1]);
        float* dshift = grad_if_needed(*self.inputs[2]);
        const float* g = self.grad.data();
        const float* h = xhat->data();
        for (int64_t ch = 0; ch < c; ++ch) {
          double gs = 0.0;
          double ghs = 0.0;
          for (int64_t b = 0; b < n; ++b) {
            const int64_t base = (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              gs += g[base + i];
              ghs += static_cast<double>(g[base + i]) * h[base + i];
            }
          }
          if (dshift) dshift[ch] += static_cast<float>(gs);
          if (dscale) dscale[ch] += static_cast<float>(ghs);
          if (dx) {
            // dx = scale * inv / m * (m * g - sum(g) - xhat * sum(g * xhat))
            const float a = sd[ch] * inv[ch] / static_cast<float>(m);
            const float mg = static_cast<float>(gs);
            const float mgh = static_cast<float>(ghs);
            for (int64_t b = 0; b < n; ++b) {
              const int64_t base = (b * c + ch) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                dx[base + i] += a * (static_cast<float>(m) * g[base + i] - mg - h[base + i] * mgh);
              }
            }
          }
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const int64_t m = a.dim(0);
  const int64_t k = a.dim(1);
  const int64_t n = b.dim(1);
  auto out = detail::allocate(m * n);
  Map(out->data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return detail::make_result("matmul", Shape{m, n}, std::move(out), {a, b},
                             [m, k, n](detail::Node& self) {
                               auto& an = *self.inputs[0];
                               auto& bn = *self.inputs[1];
                               MapC g(self.grad.data(), m, n);
                               if (an.requires_grad) {
                                 Map(detail::grad_buffer(an).data(), m, k).noalias() +=
                                     g * MapC(bn.data->data(), k, n).transpose();
                               }
                               if (bn.requires_grad) {
                                 Map(detail::grad_buffer(bn).data(), k, n).noalias() +=
                                     MapC(an.data->data(), m, k).transpose() * g;
                               }
                             });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const int64_t r = a.dim(0);
  const int64_t c = a.dim(1);
  auto out = detail::allocate(r * c);
  Map(out->data(), c, r) = MapC(a.data().data(), r, c).transpose();
  return detail::make_result("transpose", Shape{c, r}, std::move(out), {a},
                             [r, c](detail::Node& self) {
                               Map(detail::grad_buffer(*self.inputs[0]).data(), r, c) +=
                                   MapC(self.grad.data(), c, r).transpose();
                             });
}

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs[0].shape();
  if (s0.size() != 4) throw ShapeError("concat_channels: inputs must be rank-4");
  int64_t total = 0;
  std::vector<int64_t> chans;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: spatial/batch mismatch " + to_string(s0) + " vs " +
                       to_string(s));
    }
    chans.push_back(s[1]);
    total += s[1];
  }
  const int64_t n = s0[0];
  const int64_t plane = s0[2] * s0[3];
  auto out = detail::allocate(n * total * plane);
  for (int64_t b = 0; b < n; ++b) {
    int64_t offset = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      const float* src = xs[i].data().data() + b * chans[i] * plane;
      std::copy(src, src + chans[i] * plane, out->data() + (b * total + offset) * plane);
      offset += chans[i];
    }
  }
  return detail::make_result(
      "concat_channels", Shape{n, total, s0[2], s0[3]}, std::move(out),
      std::vector<Tensor>(xs.begin(), xs.end()), [n, total, plane, chans](detail::Node& self) {
        int64_t offset = 0;
        for (size_t i = 0; i < chans.size(); ++i) {
          auto& in = *self.inputs[i];
          if (in.requires_grad) {
            auto& d = detail::grad_buffer(in);
            for (int64_t b = 0; b < n; ++b) {
              const float* src = self.grad.data() + (b * total + offset) * plane;
              float* dst = d.data() + b * chans[i] * plane;
              for (int64_t j = 0; j < chans[i] * plane; ++j) dst[j] += src[j];
            }
          }
          offset += chans[i];
        }
      });
}

Tensor slice_channels(const Tensor& x, int64_t begin, int64_t count) {
  require_rank(x, 4, "slice_channels");
  const int64_t n = x.dim(0);
  const int64_t c = x.dim(1);
  if (begin < 0 || count < 1 || begin + count > c) throw ShapeError("slice_channels: range out of bounds");
  const int64_t plane = x.dim(2) * x.dim(3);
  auto out = detail::allocate(n * count * plane);
  for (int64_t b = 0; b < n; ++b) {
    const float* src = x.data().data() + (b * c + begin) * plane;
    std::copy(src, src + count * plane, out->data() + b * count * plane);
  }
  return detail::make_result("slice_channels", Shape{n, count, x.dim(2), x.dim(3)},
                             std::move(out), {x}, [n, c, begin, count, plane](detail::Node& self) {
                               auto& d = detail::grad_buffer(*self.inputs[0]);
                               for (int64_t b = 0; b < n; ++b) {
                                 const float* src = self.grad.data() + b * count * plane;
                                 float* dst = d.data() + (b * c + begin) * plane;
                                 for (int64_t j = 0; j < count * plane; ++j) dst[j] += src[j];
                               }
                             });
}

Tensor select_batch(const Tensor& x, int64_t index) {
  require_rank(x, 4, "select_batch");
  if (index < 0 || index >= x.dim(0)) throw ShapeError("select_batch: index out of range");
  const int64_t per = x.numel() / x.dim(0);
  auto out = detail::allocate(per);
  const float* src = x.data().data() + index * per;
  std::copy(src, src + per, out->data());
  return detail::make_result("select_batch", Shape{1, x.dim(1), x.dim(2), x.dim(3)},
                             std::move(out), {x}, [index, per](detail::Node& self) {
                               auto& d = detail::grad_buffer(*self.inputs[0]);
                               float* dst = d.data() + index * per;
                               for (int64_t j = 0; j < per; ++j) dst[j] += self.grad[j];
                             });
}

Tensor concat_batch(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("concat_batch: no inputs");
  const auto& s0 = xs[0].shape();
  if (s0.size() != 4) throw ShapeError("concat_batch: inputs must be rank-4");
  int64_t n = 0;
  std::vector<int64_t> sizes;
  for (const auto& x : xs) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != s0[1] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_batch: shape mismatch " + to_string(s0) + " vs " + to_string(s));
    }
    n += s[0];
    sizes.push_back(x.numel());
  }
  auto out = detail::allocate(n * s0[1] * s0[2] * s0[3]);
  int64_t offset = 0;
  for (const auto& x : xs) {
    std::copy(x.data().begin(), x.data().end(), out->data() + offset);
    offset += x.numel();
  }
  return detail::make_result("concat_batch", Shape{n, s0[1], s0[2], s0[3]}, std::move(out),
                             std::vector<Tensor>(xs.begin(), xs.end()), [sizes](detail::Node& self) {
                               int64_t off = 0;
                               for (size_t i = 0; i < sizes.size(); ++i) {
                                 auto& in = *self.inputs[i];
                                 if (in.requires_grad) {
                                   auto& d = detail::grad_buffer(in);
                                   for (int64_t j = 0; j < sizes[i]; ++j) d[j] += self.grad[off + j];
                                 }
                                 off += sizes[i];
                               }
                             });
}

Tensor topk_channels(const Tensor& x, int64_t k) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("topk_channels: expected (C,h,w) or (N,C,h,w), got " + to_string(x.shape()));
  }
  const bool batched = x.rank() == 4;
  const int64_t n = batched ? x.dim(0) : 1;
  const int64_t c = x.dim(batched ? 1 : 0);
  const int64_t h = x.dim(batched ? 2 : 1);
  const int64_t w = x.dim(batched ? 3 : 2);
  if (k < 1 || k > c) {
    throw ValueError("topk_channels: k=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  }
  const int64_t plane = h * w;
  auto out = detail::allocate(n * k * plane);
  auto picked = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(n * k * plane));
  const float* xd = x.data().data();
  std::vector<int32_t> idx(static_cast<size_t>(c));
  std::vector<float> column(static_cast<size_t>(c));
  for (int64_t b = 0; b < n; ++b) {
    const float* xb = xd + b * c * plane;
    for (int64_t s = 0; s < plane; ++s) {
      for (int64_t ch = 0; ch < c; ++ch) column[ch] = xb[ch * plane + s];
      std::iota(idx.begin(), idx.end(), 0);
      std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int32_t i, int32_t j) {
        return column[i] > column[j] || (column[i] == column[j] && i < j);
      });
      for (int64_t r = 0; r < k; ++r) {
        (*out)[(b * k + r) * plane + s] = column[idx[r]];
        (*picked)[(b * k + r) * plane + s] = idx[r];
      }
    }
  }
  Shape shape = batched ? Shape{n, k, h, w} : Shape{k, h, w};
  return detail::make_result("topk_channels", std::move(shape), std::move(out), {x},
                             [n, c, k, plane, picked](detail::Node& self) {
                               auto& d = detail::grad_buffer(*self.inputs[0]);
                               for (int64_t b = 0; b < n; ++b) {
                                 for (int64_t r = 0; r < k; ++r) {
                                   for (int64_t s = 0; s < plane; ++s) {
                                     const int64_t o = (b * k + r) * plane + s;
                                     d[(b * c + (*picked)[o]) * plane + s] += self.grad[o];
                                   }
                                 }
                               }
                             });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  auto out = x.node()->data;
  return detail::make_result("reshape", std::move(shape), std::move(out), {x},
                             [](detail::Node& self) {
                               auto& d = detail::grad_buffer(*self.inputs[0]);
                               for (size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
                             });
}

Tensor normalize_columns(const Tensor& x, float eps) {
  require_rank(x, 2, "normalize_columns");
  const int64_t c = x.dim(0);
  const int64_t p = x.dim(1);
  const float* xd = x.data().data();
  auto inv = std::make_shared<std::vector<float>>(static_cast<size_t>(p), 0.0F);
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t j = 0; j < p; ++j) (*inv)[j] += xd[ch * p + j] * xd[ch * p + j];
  }
  for (auto& v : *inv) v = 1.0F / std::max(std::sqrt(v), eps);
  auto out = detail::allocate(c * p);
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t j = 0; j < p; ++j) (*out)[ch * p + j] = xd[ch * p + j] * (*inv)[j];
  }
  auto y = out;
  return detail::make_result(
      "normalize_columns", x.shape(), std::move(out), {x}, [c, p, inv, y](detail::Node& self) {
        // For y = x / |x|: dx = (g - y * <g, y>) / |x|. Clamped columns use plain scaling.
        auto& d = detail::grad_buffer(*self.inputs[0]);
        const float* g = self.grad.data();
        std::vector<float> dot(static_cast<size_t>(p), 0.0F);
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t j = 0; j < p; ++j) dot[j] += g[ch * p + j] * (*y)[ch * p + j];
        }
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t j = 0; j < p; ++j) {
            d[ch * p + j] += (g[ch * p + j] - (*y)[ch * p + j] * dot[j]) * (*inv)[j];
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = detail::allocate(a.numel());
  std::transform(a.data().begin(), a.data().end(), b.data().begin(), out->begin(), std::plus<>());
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& d = detail::grad_buffer(*in);
      for (size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = detail::allocate(a.numel());
  std::transform(a.data().begin(), a.data().end(), b.data().begin(), out->begin(),
                 std::multiplies<>());
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& an = *self.inputs[0];
    auto& bn = *self.inputs[1];
    if (an.requires_grad) {
      auto& d = detail::grad_buffer(an);
      for (size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * (*bn.data)[i];
    }
    if (bn.requires_grad) {
      auto& d = detail::grad_buffer(bn);
      for (size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * (*an.data)[i];
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  auto out = detail::allocate(x.numel());
  std::transform(x.data().begin(), x.data().end(), out->begin(),
                 [factor](float v) { return v * factor; });
  return detail::make_result("scale", x.shape(), std::move(out), {x},
                             [factor](detail::Node& self) {
                               auto& d = detail::grad_buffer(*self.inputs[0]);
                               for (size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i] * factor;
                             });
}

namespace {

void check_broadcast(const Tensor& x, const Tensor& m, const char* op) {
  require_rank(x, 4, op);
  require_rank(m, 4, op);
  if (m.dim(0) != x.dim(0) || m.dim(1) != 1 || m.dim(2) != x.dim(2) || m.dim(3) != x.dim(3)) {
    throw ShapeError(std::string(op) + ": map " + to_string(m.shape()) +
                     " cannot broadcast over " + to_string(x.shape()));
  }
}

}  // namespace

Tensor add_channel_broadcast(const Tensor& x, const Tensor& m) {
  check_broadcast(x, m, "add_channel_broadcast");
  const int64_t n = x.dim(0);
  const int64_t c = x.dim(1);
  const int64_t plane = x.dim(2) * x.dim(3);
  auto out = detail::allocate(x.numel());
  for (int64_t b = 0; b < n; ++b) {
    const float* mm = m.data().data() + b * plane;
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* src = x.data().data() + (b * c + ch) * plane;
      float* dst = out->data() + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] + mm[i];
    }
  }
  return detail::make_result("add_channel_broadcast", x.shape(), std::move(out), {x, m},
                             [n, c, plane](detail::Node& self) {
                               float* dx = grad_if_needed(*self.inputs[0]);
                               float* dm = grad_if_needed(*self.inputs[1]);
                               for (int64_t b = 0; b < n; ++b) {
                                 for (int64_t ch = 0; ch < c; ++ch) {
                                   const float* g = self.grad.data() + (b * c + ch) * plane;
                                   for (int64_t i = 0; i < plane; ++i) {
                                     if (dx) dx[(b * c + ch) * plane + i] += g[i];
                                     if (dm) dm[b * plane + i] += g[i];
                                   }
                                 }
                               }
                             });
}

Tensor mul_channel_broadcast(const Tensor& x, const Tensor& m) {
  check_broadcast(x, m, "mul_channel_broadcast");
  const int64_t n = x.dim(0);
  const int64_t c = x.dim(1);
  const int64_t plane = x.dim(2) * x.dim(3);
  auto out = detail::allocate(x.numel());
  for (int64_t b = 0; b < n; ++b) {
    const float* mm = m.data().data() + b * plane;
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* src = x.data().data() + (b * c + ch) * plane;
      float* dst = out->data() + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i] * mm[i];
    }
  }
  return detail::make_result("mul_channel_broadcast", x.shape(), std::move(out), {x, m},
                             [n, c, plane](detail::Node& self) {
                               const float* xd = self.inputs[0]->data->data();
                               const float* md = self.inputs[1]->data->data();
                               float* dx = grad_if_needed(*self.inputs[0]);
                               float* dm = grad_if_needed(*self.inputs[1]);
                               for (int64_t b = 0; b < n; ++b) {
                                 for (int64_t ch = 0; ch < c; ++ch) {
                                   const int64_t base = (b * c + ch) * plane;
                                   const float* g = self.grad.data() + base;
                                   for (int64_t i = 0; i < plane; ++i) {
                                     if (dx) dx[base + i] += g[i] * md[b * plane + i];
                                     if (dm) dm[b * plane + i] += g[i] * xd[base + i];
                                   }
                                 }
                               }
                             });
}

Tensor channel_mean(const Tensor& x) {
  require_rank(x, 4, "channel_mean");
  const int64_t n = x.dim(0);
  const int64_t c = x.dim(1);
  const int64_t plane = x.dim(2) * x.dim(3);
  auto out = detail::allocate(n * plane);
  const float inv = 1.0F / static_cast<float>(c);
  for (int64_t b = 0; b < n; ++b) {
    float* dst = out->data() + b * plane;
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* src = x.data().data() + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
    }
    for (int64_t i = 0; i < plane; ++i) dst[i] *= inv;
  }
  return detail::make_result("channel_mean", Shape{n, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                             [n, c, plane, inv](detail::Node& self) {
                               auto& d = detail::grad_buffer(*self.inputs[0]);
                               for (int64_t b = 0; b < n; ++b) {
                                 const float* g = self.grad.data() + b * plane;
                                 for (int64_t ch = 0; ch < c; ++ch) {
                                   float* dst = d.data() + (b * c + ch) * plane;
                                   for (int64_t i = 0; i < plane; ++i) dst[i] += g[i] * inv;
                                 }
                               }
                             });
}

Tensor channel_max(const Tensor& x) {
  require_rank(x, 4, "channel_max");
  const int64_t n = x.dim(0);
  const int64_t c = x.dim(1);
  const int64_t plane = x.dim(2) * x.dim(3);
  auto out = detail::allocate(n * plane);
  auto arg = std::make_shared<std::vector<int32_t>>(static_cast<size_t>(n * plane), 0);
  for (int64_t b = 0; b < n; ++b) {
    float* dst = out->data() + b * plane;
    const float* first = x.data().data() + b * c * plane;
    std::copy(first, first + plane, dst);
    for (int64_t ch = 1; ch < c; ++ch) {
      const float* src = x.data().data() + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        if (src[i] > dst[i]) {
          dst[i] = src[i];
          (*arg)[b * plane + i] = static_cast<int32_t>(ch);
        }
      }
    }
  }
  return detail::make_result("channel_max", Shape{n, 1, x.dim(2), x.dim(3)}, std::move(out), {x},
                             [n, c, plane, arg](detail::Node& self) {
                               auto& d = detail::grad_buffer(*self.inputs[0]);
                               for (int64_t b = 0; b < n; ++b) {
                                 for (int64_t i = 0; i < plane; ++i) {
                                   d[(b * c + (*arg)[b * plane + i]) * plane + i] +=
                                       self.grad[b * plane + i];
                                 }
                               }
                             });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  auto out = detail::allocate(1, static_cast<float>(acc));
  return detail::make_result("sum", Shape{1}, std::move(out), {x}, [](detail::Node& self) {
    auto& d = detail::grad_buffer(*self.inputs[0]);
    const float g = self.grad[0];
    for (auto& v : d) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0F / static_cast<float>(x.numel()));
}

}  // namespace cmseg
