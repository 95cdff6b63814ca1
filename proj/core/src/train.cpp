#include "cmseg/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "cmseg/forge.hpp"
#include "cmseg/ops.hpp"
#include "cmseg/rng.hpp"

namespace cmseg {

std::vector<Sample> load_dataset(const std::filesystem::path& dir, int64_t height, int64_t width) {
  const auto records = read_manifest(dir / "manifest.jsonl");
  std::vector<Sample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const Image image = resize(to_rgb(read_image(dir / r.image_path)), static_cast<int>(width),
                               static_cast<int>(height));
    const Image mask = resize(to_gray(read_image(dir / r.mask_path)), static_cast<int>(width),
                              static_cast<int>(height), true);
    out.push_back({r.id, image_to_tensor(image), mask_to_tensor(mask)});
  }
  return out;
}

Tensor dihedral(const Tensor& x, int code) {
  if (x.rank() != 4) throw ShapeError("dihedral expects a rank-4 tensor, got " + to_string(x.shape()));
  const int64_t h = x.dim(2);
  const int64_t w = x.dim(3);
  const bool transpose = (code & 4) != 0;
  if (transpose && h != w) throw ShapeError("dihedral transpose needs a square input");
  const bool flip_x = (code & 1) != 0;
  const bool flip_y = (code & 2) != 0;
  const auto src = x.data();
  std::vector<float> out(src.size());
  const int64_t planes = x.dim(0) * x.dim(1);
  for (int64_t p = 0; p < planes; ++p) {
    const float* in = src.data() + p * h * w;
    float* o = out.data() + p * h * w;
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t xx = 0; xx < w; ++xx) {
        int64_t sy = transpose ? xx : y;
        int64_t sx = transpose ? y : xx;
        if (flip_x) sx = w - 1 - sx;
        if (flip_y) sy = h - 1 - sy;
        o[y * w + xx] = in[sy * w + sx];
      }
    }
  }
  return Tensor(x.shape(), std::move(out));
}

Adam::Adam(std::vector<Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<size_t>(p.numel()), 0.0F);
    v_.emplace_back(static_cast<size_t>(p.numel()), 0.0F);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(static_cast<double>(options_.beta1), static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(static_cast<double>(options_.beta2), static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const std::vector<float> g = params_[i].grad();
    auto w = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < g.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0F - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0F - options_.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= static_cast<float>(options_.lr * mhat / (std::sqrt(vhat) + options_.eps));
    }
  }
}

NonFiniteLossError::NonFiniteLossError(int epoch, int64_t step)
    : Error("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step)),
      epoch_(epoch),
      step_(step) {}

std::vector<EpochLog> train(CMSegNet& model, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& holdout, const TrainOptions& options,
                            const std::function<void(const EpochLog&)>& on_epoch) {
  if (train_set.empty()) throw ValueError("training set is empty");
  if (options.batch < 1) throw ValueError("batch must be >= 1");
  if (options.epochs < 0) throw ValueError("epochs must be >= 0");
  Adam adam(model.params().trainable(), options.adam);
  ForwardContext ctx;
  ctx.mode = Mode::kTrain;
  ctx.freeze_bn = model.config().freeze_bn;

  std::vector<EpochLog> history;
  std::vector<size_t> order(train_set.size());
  int64_t step = 0;
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(mix_seed(options.seed, static_cast<uint64_t>(epoch)));
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    }
    double loss_sum = 0.0;
    int64_t batches = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(options.batch)) {
      const size_t e = std::min(order.size(), b + static_cast<size_t>(options.batch));
      std::vector<Tensor> images;
      std::vector<Tensor> masks;
      for (size_t k = b; k < e; ++k) {
        const Sample& s = train_set[order[k]];
        int code = 0;
        if (options.augment) {
          const bool square = s.image.dim(2) == s.image.dim(3);
          code = static_cast<int>(rng.uniform_int(0, square ? 7 : 3));
        }
        images.push_back(code ? dihedral(s.image, code) : s.image);
        masks.push_back(code ? dihedral(s.mask, code) : s.mask);
      }
      ++step;
      model.params().zero_grad();
      Tensor loss;
      try {
        const Tensor prob = sigmoid(model.logits(concat_batch(images), ctx));
        loss = total_loss(prob, concat_batch(masks));
      } catch (const NonFiniteError&) {
        throw NonFiniteLossError(epoch, step);
      }
      const float value = loss.item();
      if (!std::isfinite(value)) throw NonFiniteLossError(epoch, step);
      backward(loss);
      adam.step();
      loss_sum += value;
      ++batches;
    }
    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = loss_sum / static_cast<double>(batches);
    log.steps = step;
    log.holdout_f1 = holdout.empty() ? std::numeric_limits<double>::quiet_NaN()
                                     : evaluate(model, holdout, options.threshold).mean.f1;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return history;
}

EvalReport evaluate(CMSegNet& model, const std::vector<Sample>& samples, float threshold,
                    double f1_threshold) {
  NoGradGuard guard;
  std::vector<ImageScore> scores;
  scores.reserve(samples.size());
  for (const auto& s : samples) {
    const Tensor pred = model.predict_mask(s.image, threshold);
    ImageScore score;
    score.name = s.name;
    score.confusion = confusion(pred, s.mask);
    score.rates = rates(score.confusion);
    scores.push_back(std::move(score));
  }
  return make_report(std::move(scores), f1_threshold);
}

std::string epoch_log_to_json(const EpochLog& log, uint64_t seed) {
  nlohmann::ordered_json j;
  j["epoch"] = log.epoch;
  j["mean_loss"] = log.mean_loss;
  if (std::isnan(log.holdout_f1)) {
    j["holdout_f1"] = nullptr;
  } else {
    j["holdout_f1"] = log.holdout_f1;
  }
  j["steps"] = log.steps;
  j["seconds"] = log.seconds;
  j["seed"] = seed;
  return j.dump();
}

}  // namespace cmseg
