#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cmseg/tensor.hpp"

namespace cmseg {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double rel_error = 0.0;  // worst over inputs
  size_t worst_input = 0;
  int64_t evaluations = 0;
};

/// Central finite differences against autograd for every element of every
/// input. The output is projected onto a fixed random tensor so any output
/// shape reduces to a scalar; the projection is accumulated in double.
/// Error per input is ||g_analytic - g_numeric|| / max(||g_analytic||,
/// ||g_numeric||, floor).
GradCheckResult gradcheck(const TensorFn& f, const std::vector<Tensor>& inputs, double eps,
                          uint64_t seed, double floor = 1e-6);

/// Block-directional variant for large parameter sets. `params` are
/// trainable leaves read by f. Each is perturbed in place along its own unit
/// analytic gradient direction u = g / ||g|| (a random unit vector when
/// g = 0), and ||g|| is compared with (L(p + eps u) - L(p - eps u)) / (2 eps).
/// Error is the norm of the per-parameter differences over the norm of the
/// per-parameter gradient norms.
GradCheckResult directional_gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                                      double eps, uint64_t seed, double floor = 1e-6);

}  // namespace cmseg
