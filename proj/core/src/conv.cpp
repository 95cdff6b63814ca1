#include <Eigen/Core>

#include "cmseg/autograd.hpp"
#include "cmseg/ops.hpp"

namespace cmseg {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

struct Geometry {
  int64_t n, c, h, w;     // input of the forward convolution
  int64_t oc, oh, ow;     // output of the forward convolution
  int64_t kh, kw;
  int stride, pad, dil, groups;
  int64_t cg() const { return c / groups; }
  int64_t ocg() const { return oc / groups; }
  int64_t k() const { return cg() * kh * kw; }
  int64_t p() const { return oh * ow; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  bool depthwise() const { return groups == c && groups == oc; }
};

// Rows ordered (channel, ky, kx) to match the kernel layout.
void im2col(const float* x, const Geometry& g, float* cols) {
  const int64_t p = g.p();
  for (int64_t c = 0; c < g.cg(); ++c) {
    const float* xc = x + c * g.h * g.w;
    for (int64_t ky = 0; ky < g.kh; ++ky) {
      for (int64_t kx = 0; kx < g.kw; ++kx) {
        float* row = cols + ((c * g.kh + ky) * g.kw + kx) * p;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky * g.dil;
          float* dst = row + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.ow, 0.0F);
            continue;
          }
          const float* src = xc + iy * g.w;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx * g.dil;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0F;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(const float* cols, const Geometry& g, float* x) {
  const int64_t p = g.p();
  for (int64_t c = 0; c < g.cg(); ++c) {
    float* xc = x + c * g.h * g.w;
    for (int64_t ky = 0; ky < g.kh; ++ky) {
      for (int64_t kx = 0; kx < g.kw; ++kx) {
        const float* row = cols + ((c * g.kh + ky) * g.kw + kx) * p;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
          const int64_t iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.h) continue;
          const float* src = row + oy * g.ow;
          float* dst = xc + iy * g.w;
          for (int64_t ox = 0; ox < g.ow; ++ox) {
            const int64_t ix = ox * g.stride - g.pad + kx * g.dil;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void validate(const ConvParams& p) {
  if (!p.kernel.defined() || p.kernel.rank() != 4) throw ShapeError("conv kernel must be rank-4");
  if (p.stride < 1 || p.dilation < 1 || p.groups < 1 || p.padding < 0) {
    throw ValueError("conv: stride, dilation and groups must be positive, padding non-negative");
  }
  if (p.kernel.dim(2) < 1 || p.kernel.dim(3) < 1) throw ShapeError("conv kernel extent must be >= 1");
}

void check_bias(const ConvParams& p, int64_t channels) {
  if (p.bias.defined() && (p.bias.rank() != 1 || p.bias.dim(0) != channels)) {
    throw ShapeError("conv bias shape " + to_string(p.bias.shape()) + " does not match " +
                     std::to_string(channels) + " output channels");
  }
}

// Depthwise forward: one input channel per output channel.
void depthwise_forward(const float* x, const float* k, const Geometry& g, float* y) {
  for (int64_t c = 0; c < g.c; ++c) {
    const float* xc = x + c * g.h * g.w;
    const float* kc = k + c * g.kh * g.kw;
    float* yc = y + c * g.p();
    for (int64_t oy = 0; oy < g.oh; ++oy) {
      for (int64_t ox = 0; ox < g.ow; ++ox) {
        float acc = 0.0F;
        for (int64_t ky = 0; ky < g.kh; ++ky) {
          const int64_t iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            const int64_t ix = ox * g.stride - g.pad + kx * g.dil;
            if (ix < 0 || ix >= g.w) continue;
            acc += xc[iy * g.w + ix] * kc[ky * g.kw + kx];
          }
        }
        yc[oy * g.ow + ox] = acc;
      }
    }
  }
}

void depthwise_backward(const float* x, const float* k, const float* dy, const Geometry& g,
                        float* dx, float* dk) {
  for (int64_t c = 0; c < g.c; ++c) {
    const float* xc = x + c * g.h * g.w;
    const float* kc = k + c * g.kh * g.kw;
    const float* dyc = dy + c * g.p();
    float* dxc = dx ? dx + c * g.h * g.w : nullptr;
    float* dkc = dk ? dk + c * g.kh * g.kw : nullptr;
    for (int64_t oy = 0; oy < g.oh; ++oy) {
      for (int64_t ox = 0; ox < g.ow; ++ox) {
        const float d = dyc[oy * g.ow + ox];
        if (d == 0.0F) continue;
        for (int64_t ky = 0; ky < g.kh; ++ky) {
          const int64_t iy = oy * g.stride - g.pad + ky * g.dil;
          if (iy < 0 || iy >= g.h) continue;
          for (int64_t kx = 0; kx < g.kw; ++kx) {
            const int64_t ix = ox * g.stride - g.pad + kx * g.dil;
            if (ix < 0 || ix >= g.w) continue;
            if (dxc) dxc[iy * g.w + ix] += d * kc[ky * g.kw + kx];
            if (dkc) dkc[ky * g.kw + kx] += d * xc[iy * g.w + ix];
          }
        }
      }
    }
  }
}

void add_bias(float* y, const float* b, int64_t channels, int64_t plane, int64_t batch) {
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < channels; ++c) {
      float* yc = y + (n * channels + c) * plane;
      const float v = b[c];
      for (int64_t i = 0; i < plane; ++i) yc[i] += v;
    }
  }
}

void bias_grad(const float* dy, float* db, int64_t channels, int64_t plane, int64_t batch) {
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < channels; ++c) {
      const float* dyc = dy + (n * channels + c) * plane;
      float acc = 0.0F;
      for (int64_t i = 0; i < plane; ++i) acc += dyc[i];
      db[c] += acc;
    }
  }
}

}  // namespace

int64_t conv_output_size(int64_t in, int64_t kernel, int stride, int padding, int dilation) {
  const int64_t span = in + 2 * padding - dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

int64_t conv_transpose_output_size(int64_t in, int64_t kernel, int stride, int padding,
                                   int dilation) {
  return (in - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1;
}

Tensor conv2d(const Tensor& x, const ConvParams& p) {
  validate(p);
  if (x.rank() != 4) throw ShapeError("conv2d input must be rank-4, got " + to_string(x.shape()));
  detail::check_finite("conv2d input", x.data());
  const auto& ks = p.kernel.shape();
  Geometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), ks[0], 0, 0, ks[2], ks[3],
             p.stride, p.padding, p.dilation, p.groups};
  if (g.c % g.groups != 0 || g.oc % g.groups != 0 || ks[1] != g.c / g.groups) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " incompatible with kernel " +
                     to_string(ks) + " groups " + std::to_string(p.groups));
  }
  check_bias(p, g.oc);
  g.oh = conv_output_size(g.h, g.kh, g.stride, g.pad, g.dil);
  g.ow = conv_output_size(g.w, g.kw, g.stride, g.pad, g.dil);
  if (g.oh < 1 || g.ow < 1) throw ShapeError("conv2d: kernel larger than padded input");

  auto out = detail::allocate(g.n * g.oc * g.p());
  const float* xd = x.data().data();
  const float* kd = p.kernel.data().data();
  std::vector<float> cols;
  if (g.depthwise() && ks[1] == 1) {
    for (int64_t n = 0; n < g.n; ++n) {
      depthwise_forward(xd + n * g.c * g.h * g.w, kd, g, out->data() + n * g.oc * g.p());
    }
  } else {
    if (!g.pointwise()) cols.resize(static_cast<size_t>(g.k() * g.p()));
    for (int64_t n = 0; n < g.n; ++n) {
      for (int64_t gi = 0; gi < g.groups; ++gi) {
        const float* xg = xd + (n * g.c + gi * g.cg()) * g.h * g.w;
        const float* src = xg;
        if (!g.pointwise()) {
          im2col(xg, g, cols.data());
          src = cols.data();
        }
        MapC w(kd + gi * g.ocg() * g.k(), g.ocg(), g.k());
        MapC c(src, g.k(), g.p());
        Map y(out->data() + (n * g.oc + gi * g.ocg()) * g.p(), g.ocg(), g.p());
        y.noalias() = w * c;
      }
    }
  }
  if (p.bias.defined()) add_bias(out->data(), p.bias.data().data(), g.oc, g.p(), g.n);

  const bool has_bias = p.bias.defined();
  std::vector<Tensor> inputs{x, p.kernel};
  if (has_bias) inputs.push_back(p.bias);
  return detail::make_result(
      "conv2d", Shape{g.n, g.oc, g.oh, g.ow}, std::move(out), std::move(inputs),
      [g, has_bias](detail::Node& self) {
        auto& xn = *self.inputs[0];
        auto& kn = *self.inputs[1];
        const float* xd = xn.data->data();
        const float* kd = kn.data->data();
        const float* dy = self.grad.data();
        float* dx = xn.requires_grad ? detail::grad_buffer(xn).data() : nullptr;
        float* dk = kn.requires_grad ? detail::grad_buffer(kn).data() : nullptr;
        if (has_bias && self.inputs[2]->requires_grad) {
          bias_grad(dy, detail::grad_buffer(*self.inputs[2]).data(), g.oc, g.p(), g.n);
        }
        if (!dx && !dk) return;
        if (g.depthwise() && kn.shape[1] == 1) {
          for (int64_t n = 0; n < g.n; ++n) {
            depthwise_backward(xd + n * g.c * g.h * g.w, kd, dy + n * g.oc * g.p(), g,
                               dx ? dx + n * g.c * g.h * g.w : nullptr, dk);
          }
          return;
        }
        std::vector<float> cols(g.pointwise() ? 0 : static_cast<size_t>(g.k() * g.p()));
        std::vector<float> dcols(static_cast<size_t>(g.k() * g.p()));
        for (int64_t n = 0; n < g.n; ++n) {
          for (int64_t gi = 0; gi < g.groups; ++gi) {
            const float* xg = xd + (n * g.c + gi * g.cg()) * g.h * g.w;
            MapC dyg(dy + (n * g.oc + gi * g.ocg()) * g.p(), g.ocg(), g.p());
            MapC w(kd + gi * g.ocg() * g.k(), g.ocg(), g.k());
            if (dk) {
              const float* src = xg;
              if (!g.pointwise()) {
                im2col(xg, g, cols.data());
                src = cols.data();
              }
              Map dw(dk + gi * g.ocg() * g.k(), g.ocg(), g.k());
              dw.noalias() += dyg * MapC(src, g.k(), g.p()).transpose();
            }
            if (dx) {
              float* dxg = dx + (n * g.c + gi * g.cg()) * g.h * g.w;
              if (g.pointwise()) {
                Map(dxg, g.k(), g.p()).noalias() += w.transpose() * dyg;
              } else {
                Map(dcols.data(), g.k(), g.p()).noalias() = w.transpose() * dyg;
                col2im(dcols.data(), g, dxg);
              }
            }
          }
        }
      });
}

Tensor conv_transpose2d(const Tensor& x, const ConvParams& p) {
  validate(p);
  if (x.rank() != 4) {
    throw ShapeError("conv_transpose2d input must be rank-4, got " + to_string(x.shape()));
  }
  detail::check_finite("conv_transpose2d input", x.data());
  const auto& ks = p.kernel.shape();
  if (x.dim(1) != ks[0] || ks[0] % p.groups != 0) {
    throw ShapeError("conv_transpose2d: input " + to_string(x.shape()) +
                     " incompatible with kernel " + to_string(ks));
  }
  // Geometry of the forward convolution whose adjoint this is: its input is
  // our output and vice versa.
  const int64_t oh = conv_transpose_output_size(x.dim(2), ks[2], p.stride, p.padding, p.dilation);
  const int64_t ow = conv_transpose_output_size(x.dim(3), ks[3], p.stride, p.padding, p.dilation);
  if (oh < 1 || ow < 1) throw ShapeError("conv_transpose2d: empty output");
  Geometry g{x.dim(0), ks[1] * p.groups, oh, ow, ks[0], x.dim(2), x.dim(3), ks[2], ks[3],
             p.stride, p.padding, p.dilation, p.groups};
  check_bias(p, g.c);

  auto out = detail::allocate(g.n * g.c * g.h * g.w);
  const float* xd = x.data().data();
  const float* kd = p.kernel.data().data();
  std::vector<float> cols(static_cast<size_t>(g.k() * g.p()));
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t gi = 0; gi < g.groups; ++gi) {
      MapC xg(xd + (n * g.oc + gi * g.ocg()) * g.p(), g.ocg(), g.p());
      MapC w(kd + gi * g.ocg() * g.k(), g.ocg(), g.k());
      Map(cols.data(), g.k(), g.p()).noalias() = w.transpose() * xg;
      col2im(cols.data(), g, out->data() + (n * g.c + gi * g.cg()) * g.h * g.w);
    }
  }
  if (p.bias.defined()) add_bias(out->data(), p.bias.data().data(), g.c, g.h * g.w, g.n);

  const bool has_bias = p.bias.defined();
  std::vector<Tensor> inputs{x, p.kernel};
  if (has_bias) inputs.push_back(p.bias);
  return detail::make_result(
      "conv_transpose2d", Shape{g.n, g.c, g.h, g.w}, std::move(out), std::move(inputs),
      [g, has_bias](detail::Node& self) {
        auto& xn = *self.inputs[0];
        auto& kn = *self.inputs[1];
        const float* xd = xn.data->data();
        const float* kd = kn.data->data();
        const float* dy = self.grad.data();
        float* dx = xn.requires_grad ? detail::grad_buffer(xn).data() : nullptr;
        float* dk = kn.requires_grad ? detail::grad_buffer(kn).data() : nullptr;
        if (has_bias && self.inputs[2]->requires_grad) {
          bias_grad(dy, detail::grad_buffer(*self.inputs[2]).data(), g.c, g.h * g.w, g.n);
        }
        if (!dx && !dk) return;
        std::vector<float> dcols(static_cast<size_t>(g.k() * g.p()));
        for (int64_t n = 0; n < g.n; ++n) {
          for (int64_t gi = 0; gi < g.groups; ++gi) {
            im2col(dy + (n * g.c + gi * g.cg()) * g.h * g.w, g, dcols.data());
            MapC dc(dcols.data(), g.k(), g.p());
            MapC w(kd + gi * g.ocg() * g.k(), g.ocg(), g.k());
            if (dx) Map(dx + (n * g.oc + gi * g.ocg()) * g.p(), g.ocg(), g.p()).noalias() += w * dc;
            if (dk) {
              MapC xg(xd + (n * g.oc + gi * g.ocg()) * g.p(), g.ocg(), g.p());
              Map(dk + gi * g.ocg() * g.k(), g.ocg(), g.k()).noalias() += xg * dc.transpose();
            }
          }
        }
      });
}

}  // namespace cmseg
