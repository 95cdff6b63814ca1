#include "cmseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "cmseg/ops.hpp"
#include "cmseg/rng.hpp"

namespace cmseg {

namespace {

struct Projection {
  std::vector<float> weights;

  double apply(const Tensor& out) const {
    const auto d = out.data();
    if (d.size() != weights.size()) throw ShapeError("gradcheck: output size changed");
    double acc = 0.0;
    for (size_t i = 0; i < d.size(); ++i) acc += static_cast<double>(d[i]) * weights[i];
    return acc;
  }
};

std::vector<Tensor> leaf_copies(const std::vector<Tensor>& inputs) {
  std::vector<Tensor> leaves;
  for (const auto& x : inputs) {
    Tensor leaf(x.shape(), x.to_vector());
    leaf.set_requires_grad(true);
    leaves.push_back(leaf);
  }
  return leaves;
}

// Analytic gradients of <f(x), R> and the projection R.
std::pair<std::vector<std::vector<float>>, Projection> analytic(const TensorFn& f,
                                                                const std::vector<Tensor>& leaves,
                                                                uint64_t seed) {
  const Tensor out = f(leaves);
  Rng rng(seed);
  Projection proj;
  proj.weights.resize(static_cast<size_t>(out.numel()));
  for (auto& w : proj.weights) w = rng.uniform_float(-1.0F, 1.0F);
  const Tensor r(out.shape(), proj.weights);
  backward(sum(mul(out, r)));
  std::vector<std::vector<float>> grads;
  for (const auto& x : leaves) grads.push_back(x.grad());
  return {std::move(grads), std::move(proj)};
}

double evaluate(const TensorFn& f, const std::vector<Tensor>& leaves, const Projection& proj) {
  NoGradGuard guard;
  return proj.apply(f(leaves));
}

}  // namespace

GradCheckResult gradcheck(const TensorFn& f, const std::vector<Tensor>& inputs, double eps,
                          uint64_t seed, double floor) {
  std::vector<Tensor> leaves = leaf_copies(inputs);
  const auto [grads, proj] = analytic(f, leaves, seed);
  GradCheckResult result;
  for (size_t i = 0; i < leaves.size(); ++i) {
    auto data = leaves[i].mutable_data();
    double diff2 = 0.0;
    double a2 = 0.0;
    double n2 = 0.0;
    for (size_t j = 0; j < data.size(); ++j) {
      const float orig = data[j];
      data[j] = static_cast<float>(orig + eps);
      const double hi_x = data[j];
      const double hi = evaluate(f, leaves, proj);
      data[j] = static_cast<float>(orig - eps);
      const double lo_x = data[j];
      const double lo = evaluate(f, leaves, proj);
      data[j] = orig;
      result.evaluations += 2;
      const double numeric = (hi - lo) / (hi_x - lo_x);
      const double a = grads[i][j];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
    if (rel >= result.rel_error) {
      result.rel_error = rel;
      result.worst_input = i;
    }
  }
  return result;
}

GradCheckResult directional_gradcheck(const std::function<Tensor()>& f,
                                      const std::vector<Tensor>& params, double eps, uint64_t seed,
                                      double floor) {
  for (const auto& p : params) {
    if (!p.is_leaf() || !p.requires_grad()) {
      throw ValueError("directional_gradcheck: parameters must be trainable leaves");
    }
  }
  const auto probe = [&](const std::vector<Tensor>&) { return f(); };
  for (auto p : params) p.zero_grad();
  const auto [grads, proj] = analytic(probe, params, seed);
  Rng rng(mix_seed(seed, 1));
  GradCheckResult result;
  double diff2 = 0.0;
  double a2 = 0.0;
  double worst = -1.0;
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    auto data = p.mutable_data();
    const std::vector<float> orig(data.begin(), data.end());
    double norm = 0.0;
    for (float g : grads[i]) norm += static_cast<double>(g) * g;
    norm = std::sqrt(norm);
    std::vector<double> dir(orig.size());
    for (size_t j = 0; j < dir.size(); ++j) {
      dir[j] = norm > 0.0 ? grads[i][j] / norm
                          : ((rng.next() & 1U) ? 1.0 : -1.0) / std::sqrt(static_cast<double>(dir.size()));
    }
    for (size_t j = 0; j < dir.size(); ++j) data[j] = static_cast<float>(orig[j] + eps * dir[j]);
    const double hi = evaluate(probe, params, proj);
    for (size_t j = 0; j < dir.size(); ++j) data[j] = static_cast<float>(orig[j] - eps * dir[j]);
    const double lo = evaluate(probe, params, proj);
    std::copy(orig.begin(), orig.end(), data.begin());
    result.evaluations += 2;
    const double numeric = (hi - lo) / (2.0 * eps);
    const double diff = norm - numeric;
    diff2 += diff * diff;
    a2 += norm * norm;
    if (std::abs(diff) > worst) {
      worst = std::abs(diff);
      result.worst_input = i;
    }
  }
  result.rel_error = std::sqrt(diff2) / std::max(std::sqrt(a2), floor);
  return result;
}

}  // namespace cmseg
