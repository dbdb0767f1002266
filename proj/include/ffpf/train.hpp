#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffpf/dataset.hpp"
#include "ffpf/model.hpp"

namespace ffpf {

struct TrainConfig {
  int epochs = 12;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 8;
  // Global L2 norm the gradient is rescaled to when it exceeds it; 0 disables clipping.
  double grad_clip = 10.0;
  std::uint64_t seed = 0;
  // Evaluate AP@0.5 on the held-out split after every epoch rather than only the last.
  bool eval_every_epoch = true;

  void validate() const;
};

/// Epochs after which the rate is multiplied by 0.1: {8, 11} for 12 epochs, otherwise
/// {ceil(2E/3), ceil(11E/12)} with milestones that are not before the last epoch dropped.
std::vector<int> lr_milestones(int epochs);

/// Learning rate in effect during 1-based `epoch`.
double learning_rate(const TrainConfig& config, int epoch);

/// SGD with momentum and L2 weight decay: v = m v + g + wd w; w -= lr v.
template <typename T>
class Sgd {
 public:
  Sgd(ParameterStore<T>& store, double momentum, double weight_decay);

  void step(double lr);
  void zero_grad();

  /// Momentum buffer of a trainable parameter, keyed by its name.
  Tensor<T>& velocity(const std::string& name);
  const std::vector<Parameter<T>*>& params() const { return params_; }

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<Tensor<T>> velocity_;
  double momentum_;
  double weight_decay_;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm. Returns the norm before.
template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(std::int64_t step, int epoch)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) + " (epoch " +
                           std::to_string(epoch) + ")"),
        step_(step) {}
  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double classification = 0;
  double regression = 0;
  double ap50 = 0;  // NaN when not evaluated this epoch
  double seconds = 0;
};

/// Everything a run needs to continue from where it stopped.
struct TrainState {
  int epoch = 0;
  std::int64_t step = 0;
};

/// Per-image anchor targets for a whole split.
std::vector<std::vector<AnchorTarget>> precompute_targets(const Dataset& data,
                                                          const FFPFModel<float>& model);

/// Mean AP@0.5 of `model` on `data`, plus the raw detections when requested.
MapResult evaluate(const FFPFModel<float>& model, const Dataset& data, int batch_size = 16,
                   std::vector<std::vector<BoxDetection>>* detections = nullptr);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs the remaining epochs of `config` on `model`. The shuffle order of epoch e depends only
/// on (seed, e), so resuming from a checkpoint replays the same sequence. `test` may be empty.
std::vector<EpochMetrics> train(FFPFModel<float>& model, Sgd<float>& optimizer, TrainState& state,
                                const Dataset& train_data, const Dataset* test_data,
                                const TrainConfig& config, const EpochCallback& on_epoch = {});

struct AblationRow {
  std::string name;
  bool fu = false;
  bool bs_fpn = false;
  double ap50 = 0;
  double final_loss = 0;
  double seconds = 0;
  std::vector<EpochMetrics> history;
};

/// Trains baseline, +F-ResNet, +BS-FPN and the full model with identical seeds and data order.
std::vector<AblationRow> ablate(const Dataset& train_data, const Dataset& test_data,
                                const ModelConfig& base, const TrainConfig& config,
                                const std::function<void(const AblationRow&)>& on_row = {},
                                const EpochCallback& on_epoch = {});

/// Fixed-width text table, one row per configuration.
std::string format_ablation_table(const std::vector<AblationRow>& rows);

}  // namespace ffpf
