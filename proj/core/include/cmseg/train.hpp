#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "cmseg/loss_metrics.hpp"
#include "cmseg/model.hpp"

namespace cmseg {

/// One image/mask pair resized to the model input.
struct Sample {
  std::string name;
  Tensor image;  // (1, 3, H, W) in [0, 1]
  Tensor mask;   // (1, 1, H, W) in {0, 1}
};

/// Loads every record of <dir>/manifest.jsonl, resizing images bilinearly
/// and masks by nearest neighbour to width x height.
std::vector<Sample> load_dataset(const std::filesystem::path& dir, int64_t height, int64_t width);

struct AdamOptions {
  float lr = 1e-3F;
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float eps = 1e-8F;
};

class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamOptions options);

  /// Applies one update from the accumulated gradients.
  void step();
  int64_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  AdamOptions options_;
  int64_t t_ = 0;
};

struct TrainOptions {
  int epochs = 10;
  int batch = 4;
  AdamOptions adam;
  uint64_t seed = 0;
  float threshold = 0.5F;
  /// Random flips and (for square inputs) transposes of each training pair.
  bool augment = true;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double holdout_f1 = 0.0;  // NaN without a holdout set
  int64_t steps = 0;
  double seconds = 0.0;
};

/// One of the eight symmetries of the square applied to a (N, C, H, W)
/// tensor: bit 0 flips x, bit 1 flips y, bit 2 transposes (square only).
Tensor dihedral(const Tensor& x, int code);

class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(int epoch, int64_t step);
  int epoch() const { return epoch_; }
  int64_t step() const { return step_; }

 private:
  int epoch_;
  int64_t step_;
};

/// Mini-batch training with bce + dice. Epoch e shuffles with
/// mix_seed(seed, e). Throws NonFiniteLossError on a NaN or infinite loss.
std::vector<EpochLog> train(CMSegNet& model, const std::vector<Sample>& train_set,
                            const std::vector<Sample>& holdout, const TrainOptions& options,
                            const std::function<void(const EpochLog&)>& on_epoch = {});

/// Per-image confusion at `threshold`, aggregated into a report.
EvalReport evaluate(CMSegNet& model, const std::vector<Sample>& samples, float threshold = 0.5F,
                    double f1_threshold = 0.5);

std::string epoch_log_to_json(const EpochLog& log, uint64_t seed);

}  // namespace cmseg
