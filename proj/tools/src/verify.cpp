#include "cmseg/tools/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "cmseg/cosa.hpp"
#include "cmseg/gradcheck.hpp"
#include "cmseg/loss_metrics.hpp"
#include "cmseg/model.hpp"
#include "cmseg/ops.hpp"
#include "cmseg/rng.hpp"

namespace cmseg::tools {

namespace {

using Clock = std::chrono::steady_clock;

std::function<Tensor(int64_t, int64_t, float)> suppression_of(const VerifyHooks& hooks) {
  if (hooks.suppression) return hooks.suppression;
  return [](int64_t h, int64_t w, float gamma) { return suppression_matrix(h, w, gamma); };
}

Tensor random_tensor(Shape shape, Rng& rng, float lo = -1.0F, float hi = 1.0F) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform_float(lo, hi);
  return t;
}

std::string format(const char* fmt, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), fmt, a, b);
  return buf;
}

template <typename Body>
CheckResult timed(const std::string& name, Body body) {
  const auto start = Clock::now();
  CheckResult r;
  r.name = name;
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

// Reference self-correlation computed site by site in double precision.
std::vector<double> brute_force_cor(const Tensor& t, int64_t k, float gamma) {
  const int64_t c = t.dim(0);
  const int64_t h = t.dim(1);
  const int64_t w = t.dim(2);
  const int64_t n = h * w;
  const auto x = t.data();
  std::vector<double> norms(static_cast<size_t>(n), 0.0);
  for (int64_t s = 0; s < n; ++s) {
    for (int64_t ch = 0; ch < c; ++ch) norms[s] += static_cast<double>(x[ch * n + s]) * x[ch * n + s];
    norms[s] = std::sqrt(norms[s]);
  }
  std::vector<double> out(static_cast<size_t>(k * n));
  std::vector<double> row(static_cast<size_t>(n));
  const double g2 = 2.0 * static_cast<double>(gamma) * gamma;
  for (int64_t s = 0; s < n; ++s) {
    for (int64_t u = 0; u < n; ++u) {
      double dot = 0.0;
      for (int64_t ch = 0; ch < c; ++ch) dot += static_cast<double>(x[ch * n + s]) * x[ch * n + u];
      const double cosine = (norms[s] > 0.0 && norms[u] > 0.0) ? dot / (norms[s] * norms[u]) : 0.0;
      const double dy = static_cast<double>(s / w - u / w);
      const double dx = static_cast<double>(s % w - u % w);
      row[u] = cosine * (1.0 - std::exp(-(dx * dx + dy * dy) / g2));
    }
    std::sort(row.begin(), row.end(), std::greater<>());
    for (int64_t j = 0; j < k; ++j) out[j * n + s] = row[j];
  }
  return out;
}

struct OpCase {
  std::string name;
  TensorFn fn;
  std::vector<Tensor> inputs;
  double eps = 1e-3;
};

// Values at least 1e-3 away from the relu6 kinks at 0 and 6.
Tensor smooth_relu6_input(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.mutable_data()) {
    do {
      v = rng.uniform_float(-1.5F, 7.5F);
    } while (std::abs(v) < 0.02F || std::abs(v - 6.0F) < 0.02F);
  }
  return t;
}

// Distinct values at least 0.05 apart, so selections such as top-k and max
// keep the same winners under a 1e-3 perturbation.
Tensor separated_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  auto d = t.mutable_data();
  for (size_t i = 0; i < d.size(); ++i) d[i] = -1.0F + 0.05F * static_cast<float>(i);
  for (size_t i = d.size(); i > 1; --i) {
    std::swap(d[i - 1], d[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
  }
  return t;
}

// Random (C, h, w) features whose per-site ranked affinities, down to rank
// k + 1, differ pairwise by at least `gap`.
Tensor untied_cor_input(Shape shape, int64_t k, float gamma, double gap, Rng& rng) {
  const int64_t n = shape[2] * shape[3];
  for (;;) {
    Tensor t = random_tensor(shape, rng);
    const auto ranked = brute_force_cor(reshape(t, {shape[1], shape[2], shape[3]}), n, gamma);
    bool ok = true;
    for (int64_t s = 0; s < n && ok; ++s) {
      for (int64_t j = 0; j < std::min(k, n - 1) && ok; ++j) ok = ranked[j * n + s] - ranked[(j + 1) * n + s] >= gap;
    }
    if (ok) return t;
  }
}

std::vector<OpCase> op_cases(Rng& rng) {
  std::vector<OpCase> cases;
  const auto conv = [](int stride, int padding, int dilation, int groups) {
    return [=](const std::vector<Tensor>& v) {
      return conv2d(v[0], ConvParams{v[1], v[2], stride, padding, dilation, groups});
    };
  };
  cases.push_back({"conv2d_3x3", conv(1, 1, 1, 1),
                   {random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)},
                   1e-2});
  cases.push_back({"conv2d_stride2", conv(2, 1, 1, 1),
                   {random_tensor({2, 3, 7, 7}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)},
                   1e-2});
  cases.push_back({"conv2d_dilated", conv(1, 4, 4, 1),
                   {random_tensor({1, 3, 6, 6}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({2}, rng)},
                   1e-2});
  cases.push_back({"conv2d_depthwise", conv(2, 1, 1, 4),
                   {random_tensor({2, 4, 6, 6}, rng), random_tensor({4, 1, 3, 3}, rng), random_tensor({4}, rng)},
                   1e-2});
  cases.push_back({"conv2d_grouped", conv(1, 1, 1, 2),
                   {random_tensor({1, 4, 5, 5}, rng), random_tensor({6, 2, 3, 3}, rng), random_tensor({6}, rng)},
                   1e-2});
  cases.push_back({"conv2d_1x1", conv(1, 0, 1, 1),
                   {random_tensor({2, 5, 4, 4}, rng), random_tensor({3, 5, 1, 1}, rng), random_tensor({3}, rng)},
                   1e-2});
  cases.push_back({"conv_transpose2d",
                   [](const std::vector<Tensor>& v) {
                     return conv_transpose2d(v[0], ConvParams{v[1], v[2], 2, 0, 1, 1});
                   },
                   {random_tensor({2, 3, 3, 3}, rng), random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng)},
                   1e-2});
  cases.push_back({"conv_transpose2d_3x3",
                   [](const std::vector<Tensor>& v) {
                     return conv_transpose2d(v[0], ConvParams{v[1], v[2], 2, 1, 1, 1});
                   },
                   {random_tensor({1, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({3}, rng)},
                   1e-2});
  cases.push_back({"relu6", [](const std::vector<Tensor>& v) { return relu6(v[0]); },
                   {smooth_relu6_input({2, 3, 4, 4}, rng)}});
  cases.push_back({"sigmoid", [](const std::vector<Tensor>& v) { return sigmoid(v[0]); },
                   {random_tensor({2, 3, 4, 4}, rng, -4.0F, 4.0F)}});
  {
    const Tensor mean = random_tensor({3}, rng);
    const Tensor var = random_tensor({3}, rng, 0.5F, 2.0F);
    cases.push_back({"batchnorm",
                     [mean, var](const std::vector<Tensor>& v) { return batchnorm(v[0], mean, var, v[1], v[2], 1e-5F); },
                     {random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng), random_tensor({3}, rng)}});
  }
  cases.push_back({"batchnorm_train",
                   [](const std::vector<Tensor>& v) { return batchnorm_train(v[0], v[1], v[2], 1e-5F, nullptr); },
                   {random_tensor({2, 3, 3, 3}, rng, -2.0F, 2.0F), random_tensor({3}, rng), random_tensor({3}, rng)}});
  cases.push_back({"matmul", [](const std::vector<Tensor>& v) { return matmul(v[0], v[1]); },
                   {random_tensor({4, 5}, rng), random_tensor({5, 3}, rng)}});
  cases.push_back({"transpose", [](const std::vector<Tensor>& v) { return transpose(v[0]); },
                   {random_tensor({4, 5}, rng)}});
  cases.push_back({"normalize_columns", [](const std::vector<Tensor>& v) { return normalize_columns(v[0]); },
                   {random_tensor({4, 6}, rng)}});
  cases.push_back({"topk_channels", [](const std::vector<Tensor>& v) { return topk_channels(v[0], 3); },
                   {separated_tensor({2, 6, 3, 3}, rng)}});
  cases.push_back({"concat_slice",
                   [](const std::vector<Tensor>& v) {
                     const std::array<Tensor, 2> parts{v[0], v[1]};
                     return slice_channels(concat_channels(parts), 1, 4);
                   },
                   {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)}});
  cases.push_back({"add_channel_broadcast",
                   [](const std::vector<Tensor>& v) { return add_channel_broadcast(v[0], v[1]); },
                   {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 1, 4, 4}, rng)}});
  cases.push_back({"mul_channel_broadcast",
                   [](const std::vector<Tensor>& v) { return mul_channel_broadcast(v[0], v[1]); },
                   {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 1, 4, 4}, rng)}});
  cases.push_back({"channel_mean", [](const std::vector<Tensor>& v) { return channel_mean(v[0]); },
                   {random_tensor({2, 4, 3, 3}, rng)}});
  cases.push_back({"channel_max", [](const std::vector<Tensor>& v) { return channel_max(v[0]); },
                   {separated_tensor({2, 4, 3, 3}, rng)}});
  cases.push_back({"elementwise",
                   [](const std::vector<Tensor>& v) { return scale(add(mul(v[0], v[1]), v[0]), 0.5F); },
                   {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}});
  cases.push_back({"reductions",
                   [](const std::vector<Tensor>& v) { return add(sum(v[0]), mean(mul(v[0], v[0]))); },
                   {random_tensor({3, 4}, rng)}});
  cases.push_back({"cor_forward",
                   [](const std::vector<Tensor>& v) { return cor_forward(v[0], CoRConfig{2.0F, 3}); },
                   {untied_cor_input({1, 5, 3, 3}, 3, 2.0F, 0.02, rng)}});
  {
    Tensor gt({2, 1, 4, 4});
    for (auto& v : gt.mutable_data()) v = rng.uniform() < 0.4 ? 1.0F : 0.0F;
    cases.push_back({"bce_loss", [gt](const std::vector<Tensor>& v) { return bce_loss(v[0], gt); },
                     {random_tensor({2, 1, 4, 4}, rng, 0.05F, 0.95F)}});
    cases.push_back({"dice_loss", [gt](const std::vector<Tensor>& v) { return dice_loss(v[0], gt); },
                     {random_tensor({2, 1, 4, 4}, rng, 0.05F, 0.95F)}});
    cases.push_back({"total_loss", [gt](const std::vector<Tensor>& v) { return total_loss(v[0], gt); },
                     {random_tensor({2, 1, 4, 4}, rng, 0.05F, 0.95F)}});
  }
  return cases;
}

WeightArchive small_archive(Rng& rng, int tensors) {
  WeightArchive a;
  for (int i = 0; i < tensors; ++i) {
    Shape shape;
    const auto rank = rng.uniform_int(0, 4);
    for (int64_t d = 0; d < rank; ++d) shape.push_back(rng.uniform_int(1, 5));
    Tensor t(shape);
    for (auto& v : t.mutable_data()) v = rng.uniform_float(-100.0F, 100.0F);
    a.add("t" + std::to_string(i) + ".w" + std::to_string(rng.uniform_int(0, 999)), t);
  }
  return a;
}

std::vector<uint8_t> with_header(const std::string& header, size_t payload_bytes) {
  std::vector<uint8_t> out{'C', 'M', 'S', 'W', 1, 0, 0, 0};
  uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(len >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  out.resize(out.size() + payload_bytes, 0);
  return out;
}

}  // namespace

CheckResult check_suppression(const VerifyHooks& hooks) {
  return timed("suppression_matrix", [&](CheckResult& r) {
    const auto phi_fn = suppression_of(hooks);
    const int64_t h = 5;
    const int64_t w = 6;
    const int64_t n = h * w;
    const Tensor phi = phi_fn(h, w, 4.0F);
    const auto p = phi.data();
    std::vector<std::string> failures;
    double max_asym = 0.0;
    double max_diag = 0.0;
    bool in_range = true;
    bool monotone = true;
    for (int64_t s = 0; s < n; ++s) {
      max_diag = std::max(max_diag, std::abs(static_cast<double>(p[s * n + s])));
      for (int64_t t = 0; t < n; ++t) {
        const float v = p[s * n + t];
        max_asym = std::max(max_asym, std::abs(static_cast<double>(v) - p[t * n + s]));
        if (!(v >= 0.0F && v < 1.0F)) in_range = false;
        const int64_t d2 = (s / w - t / w) * (s / w - t / w) + (s % w - t % w) * (s % w - t % w);
        for (int64_t u = 0; u < n; ++u) {
          const int64_t e2 = (s / w - u / w) * (s / w - u / w) + (s % w - u % w) * (s % w - u % w);
          if (d2 < e2 && !(v <= p[s * n + u])) monotone = false;
        }
      }
    }
    // Site (0, 0) against site (row 4, col 3): squared distance 25.
    const double at_34 = p[0 * n + (4 * w + 3)];
    if (max_asym != 0.0) failures.push_back("asymmetric");
    if (max_diag != 0.0) failures.push_back("nonzero diagonal");
    if (!in_range) failures.push_back("value outside [0, 1)");
    if (!monotone) failures.push_back("not monotone in squared distance");
    if (std::abs(at_34 - 0.5422) > 1e-4) failures.push_back(format("phi(d=5) = %.6f, want 0.5422", at_34));
    r.passed = failures.empty();
    std::ostringstream os;
    os << format("phi(d=5)=%.6f", at_34);
    for (const auto& f : failures) os << "; " << f;
    r.detail = os.str();
  });
}

CheckResult check_affinity_oracle(const VerifyHooks& hooks, int seeds) {
  return timed("affinity_oracle", [&](CheckResult& r) {
    const auto phi_fn = suppression_of(hooks);
    double worst = 0.0;
    for (int seed = 0; seed < seeds; ++seed) {
      Rng rng(mix_seed(0xAFF1, static_cast<uint64_t>(seed)));
      const int64_t c = rng.uniform_int(1, 8);
      const int64_t h = rng.uniform_int(1, 6);
      const int64_t w = rng.uniform_int(1, 6);
      const int64_t k = rng.uniform_int(1, std::min(c, h * w));
      const float gamma = rng.uniform_float(0.5F, 4.0F);
      const Tensor t = random_tensor({c, h, w}, rng);
      const Tensor got = cor_forward(t, CoRConfig{gamma, k}, phi_fn(h, w, gamma));
      const auto want = brute_force_cor(t, k, gamma);
      const auto g = got.data();
      for (size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(g[i] - want[i]));
    }
    r.passed = worst < 1e-5;
    r.detail = format("max abs diff %.3e over %.0f tensors", worst, seeds);
  });
}

CheckResult check_scale_invariance(const VerifyHooks& hooks, int seeds) {
  return timed("scale_invariance", [&](CheckResult& r) {
    const auto phi_fn = suppression_of(hooks);
    double worst = 0.0;
    for (int seed = 0; seed < seeds; ++seed) {
      Rng rng(mix_seed(0x5CA1E, static_cast<uint64_t>(seed)));
      const int64_t c = rng.uniform_int(2, 8);
      const int64_t h = rng.uniform_int(2, 6);
      const int64_t w = rng.uniform_int(2, 6);
      const CoRConfig cfg{4.0F, std::min<int64_t>(c, h * w)};
      const Tensor t = random_tensor({c, h, w}, rng);
      Tensor scaled({c, h, w});
      const auto src = t.data();
      auto dst = scaled.mutable_data();
      for (int64_t s = 0; s < h * w; ++s) {
        const float f = std::exp(rng.uniform_float(-3.0F, 3.0F));
        for (int64_t ch = 0; ch < c; ++ch) dst[ch * h * w + s] = src[ch * h * w + s] * f;
      }
      const Tensor phi = phi_fn(h, w, cfg.gamma);
      const auto a = cor_forward(t, cfg, phi).to_vector();
      const auto b = cor_forward(scaled, cfg, phi).to_vector();
      for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(a[i] - b[i])));
    }
    r.passed = worst < 1e-5;
    r.detail = format("max abs change %.3e", worst);
  });
}

CheckResult check_op_gradients(int seeds) {
  return timed("op_gradients", [&](CheckResult& r) {
    double worst = 0.0;
    std::string worst_name;
    int checked = 0;
    for (int seed = 0; seed < seeds; ++seed) {
      Rng rng(mix_seed(0x0F5, static_cast<uint64_t>(seed)));
      for (const auto& c : op_cases(rng)) {
        const auto res = gradcheck(c.fn, c.inputs, c.eps, static_cast<uint64_t>(seed));
        ++checked;
        if (res.rel_error >= worst) {
          worst = res.rel_error;
          worst_name = c.name;
        }
      }
    }
    r.passed = worst < 1e-3;
    r.detail = format("worst rel err %.3e over %.0f checks", worst, checked) + " (" + worst_name + ")";
  });
}

CheckResult check_model_gradients(int seeds) {
  return timed("model_gradients", [&](CheckResult& r) {
    double worst = 0.0;
    for (int seed = 0; seed < seeds; ++seed) {
      const int64_t size = 32;
      ModelConfig cfg;
      cfg.encoder.height = size;
      cfg.encoder.width = size;
      cfg.encoder.width_multiplier = 0.25F;
      cfg.encoder.seed = static_cast<uint64_t>(seed);
      CMSegNet net(cfg);
      Rng rng(mix_seed(0x40DE1, static_cast<uint64_t>(seed)));
      for (const auto& p : net.params().items()) {
        const bool bias = p.name.ends_with(".b") || p.name.find("bn_shift") != std::string::npos;
        if (!bias) continue;
        Tensor t = p.tensor;
        for (auto& v : t.mutable_data()) v += rng.uniform_float(-0.1F, 0.1F);
      }
      Tensor image = random_tensor({2, 3, size, size}, rng, 0.0F, 1.0F);
      image.set_requires_grad(true);
      Tensor gt({2, 1, size, size});
      for (auto& v : gt.mutable_data()) v = rng.uniform() < 0.2 ? 1.0F : 0.0F;
      ForwardContext ctx;
      auto params = net.params().trainable();
      params.push_back(image);
      const auto res = directional_gradcheck(
          [&] { return total_loss(sigmoid(net.logits(image, ctx)), gt); }, params, 3e-4,
          static_cast<uint64_t>(seed));
      worst = std::max(worst, res.rel_error);
    }
    r.passed = worst < 1e-2;
    r.detail = format("worst rel err %.3e over %.0f seeds", worst, seeds);
  });
}

CheckResult check_archive_roundtrip(int count) {
  return timed("archive_roundtrip", [&](CheckResult& r) {
    int failures = 0;
    for (int i = 0; i < count; ++i) {
      Rng rng(mix_seed(0xA4C, static_cast<uint64_t>(i)));
      const auto first = serialize(small_archive(rng, static_cast<int>(rng.uniform_int(0, 8))));
      const auto second = serialize(deserialize(first));
      if (first != second) ++failures;
    }
    r.passed = failures == 0;
    r.detail = format("%.0f of %.0f archives changed", failures, count);
  });
}

std::vector<MalformedArchive> malformed_archives() {
  Rng rng(99);
  const auto valid = serialize(small_archive(rng, 3));
  std::vector<MalformedArchive> out;
  auto bad_magic = valid;
  bad_magic[0] = 'X';
  out.push_back({"bad_magic", bad_magic, ArchiveErrc::kBadMagic});
  auto bad_version = valid;
  bad_version[4] = 7;
  out.push_back({"bad_version", bad_version, ArchiveErrc::kUnsupportedVersion});
  out.push_back({"truncated", std::vector<uint8_t>(valid.begin(), valid.begin() + 20), ArchiveErrc::kTruncated});
  out.push_back({"malformed_header", with_header("{\"a\": [1, 2", 16), ArchiveErrc::kMalformedHeader});
  out.push_back({"overlapping_entries",
                 with_header(R"({"a":{"shape":[2],"offset":0,"nbytes":8},"b":{"shape":[2],"offset":4,"nbytes":8}})", 16),
                 ArchiveErrc::kOverlap});
  out.push_back({"out_of_range", with_header(R"({"a":{"shape":[4],"offset":8,"nbytes":16}})", 16),
                 ArchiveErrc::kOutOfRange});
  return out;
}

CheckResult check_archive_malformed() {
  return timed("archive_malformed", [&](CheckResult& r) {
    std::vector<std::string> failures;
    const auto fixtures = malformed_archives();
    for (const auto& f : fixtures) {
      try {
        (void)deserialize(f.bytes);
        failures.push_back(f.name + " accepted");
      } catch (const ArchiveError& e) {
        if (e.code() != f.expected) failures.push_back(f.name + " raised " + to_string(e.code()));
      }
    }
    r.passed = failures.empty();
    std::ostringstream os;
    os << fixtures.size() << " fixtures";
    for (const auto& f : failures) os << "; " << f;
    r.detail = os.str();
  });
}

std::vector<CheckResult> run_verify(const VerifyHooks& hooks) {
  return {check_suppression(hooks),
          check_affinity_oracle(hooks),
          check_scale_invariance(hooks),
          check_op_gradients(),
          check_model_gradients(),
          check_archive_roundtrip(),
          check_archive_malformed()};
}

void print_checks(const std::vector<CheckResult>& checks, std::ostream& out) {
  for (const auto& c : checks) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-4s  %-20s %8.2fs  ", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                  c.seconds);
    out << line << c.detail << '\n';
  }
}

}  // namespace cmseg::tools
