#include "ffpf/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace ffpf {
namespace {

Tensor<float> gather_images(const Tensor<float>& images, std::span<const std::int64_t> idx) {
  const Shape s = images.shape();
  Tensor<float> out(Shape{static_cast<std::int64_t>(idx.size()), s.c, s.h, s.w});
  const std::int64_t stride = s.c * s.h * s.w;
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.data() + idx[i] * stride, stride,
                out.data() + static_cast<std::int64_t>(i) * stride);
  return out;
}

std::vector<std::int64_t> epoch_order(std::int64_t n, std::uint64_t seed, int epoch) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), std::int64_t{0});
  Rng rng(mix_seed(seed ^ mix_seed(static_cast<std::uint64_t>(epoch) + 0x5eed)));
  for (std::int64_t i = n - 1; i > 0; --i)
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(rng.integer(0, i))]);
  return order;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be non-negative");
  if (!(lr > 0)) throw std::invalid_argument("TrainConfig: learning rate must be positive");
  if (momentum < 0 || momentum >= 1) throw std::invalid_argument("TrainConfig: momentum in [0, 1)");
  if (weight_decay < 0) throw std::invalid_argument("TrainConfig: negative weight decay");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be positive");
  if (grad_clip < 0) throw std::invalid_argument("TrainConfig: negative gradient clip");
}

std::vector<int> lr_milestones(int epochs) {
  std::vector<int> m = epochs == 12
                           ? std::vector<int>{8, 11}
                           : std::vector<int>{(2 * epochs + 2) / 3, (11 * epochs + 11) / 12};
  std::erase_if(m, [epochs](int e) { return e >= epochs; });
  return m;
}

double learning_rate(const TrainConfig& config, int epoch) {
  double lr = config.lr;
  for (int m : lr_milestones(config.epochs))
    if (epoch > m) lr *= 0.1;
  return lr;
}

template <typename T>
Sgd<T>::Sgd(ParameterStore<T>& store, double momentum, double weight_decay)
    : params_(store.trainable()), momentum_(momentum), weight_decay_(weight_decay) {
  for (Parameter<T>* p : params_) velocity_.emplace_back(p->value.shape());
}

template <typename T>
void Sgd<T>::step(double lr) {
  const T m = static_cast<T>(momentum_);
  const T wd = static_cast<T>(weight_decay_);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<T>& p = *params_[i];
    if (!(p.grad.shape() == p.value.shape())) p.zero_grad();
    T* w = p.value.data();
    const T* g = p.grad.data();
    T* v = velocity_[i].data();
    for (std::int64_t k = 0; k < p.value.numel(); ++k) {
      v[k] = m * v[k] + g[k] + wd * w[k];
      w[k] -= rate * v[k];
    }
  }
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (Parameter<T>* p : params_) p->zero_grad();
}

template <typename T>
Tensor<T>& Sgd<T>::velocity(const std::string& name) {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i]->name == name) return velocity_[i];
  throw std::out_of_range("Sgd: no trainable parameter named '" + name + "'");
}

template <typename T>
double clip_grad_norm(std::span<Parameter<T>* const> params, double max_norm) {
  double sq = 0;
  for (const Parameter<T>* p : params)
    for (T g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (Parameter<T>* p : params)
      for (T& g : p->grad.values()) g *= factor;
  }
  return norm;
}

template double clip_grad_norm<float>(std::span<Parameter<float>* const>, double);
template double clip_grad_norm<double>(std::span<Parameter<double>* const>, double);

template class Sgd<float>;
template class Sgd<double>;

std::vector<std::vector<AnchorTarget>> precompute_targets(const Dataset& data,
                                                          const FFPFModel<float>& model) {
  const Shape s = data.images.shape();
  const auto& anchors = model.anchors(s.h, s.w);
  std::vector<std::vector<AnchorTarget>> targets;
  targets.reserve(data.boxes.size());
  for (const auto& gts : data.boxes) {
    for (const auto& g : gts)
      if (g.class_id >= model.config().num_classes)
        throw std::invalid_argument("dataset class id " + std::to_string(g.class_id) +
                                    " exceeds the model's class count");
    targets.push_back(assign_targets(anchors, gts));
  }
  return targets;
}

MapResult evaluate(const FFPFModel<float>& model, const Dataset& data, int batch_size,
                   std::vector<std::vector<BoxDetection>>* detections) {
  std::vector<std::vector<BoxDetection>> all;
  const std::int64_t n = data.size();
  std::vector<std::int64_t> idx;
  for (std::int64_t start = 0; start < n; start += batch_size) {
    idx.clear();
    for (std::int64_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    auto batch = model.predict(gather_images(data.images, idx));
    for (auto& d : batch) all.push_back(std::move(d));
  }
  MapResult result = evaluate_map(all, data.boxes, model.config().num_classes, 0.5);
  if (detections != nullptr) *detections = std::move(all);
  return result;
}

std::vector<EpochMetrics> train(FFPFModel<float>& model, Sgd<float>& optimizer, TrainState& state,
                                const Dataset& train_data, const Dataset* test_data,
                                const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const auto targets = precompute_targets(train_data, model);
  const ModelConfig& mc = model.config();
  const std::int64_t n = train_data.size();
  std::vector<EpochMetrics> history;

  while (state.epoch < config.epochs) {
    const int epoch = state.epoch + 1;
    const auto start = std::chrono::steady_clock::now();
    const double lr = learning_rate(config, epoch);
    const auto order = epoch_order(n, config.seed, epoch);
    double loss_sum = 0;
    double cls_sum = 0;
    double reg_sum = 0;
    std::int64_t batches = 0;
    for (std::int64_t b = 0; b < n; b += config.batch_size) {
      const std::span<const std::int64_t> idx(order.data() + b,
                                              static_cast<std::size_t>(std::min<std::int64_t>(config.batch_size, n - b)));
      std::vector<std::vector<AnchorTarget>> batch_targets;
      for (std::int64_t i : idx) batch_targets.push_back(targets[static_cast<std::size_t>(i)]);

      Tape<float> tape;
      HeadOutputs<float> out =
          model.forward(tape.constant(gather_images(train_data.images, idx)), NormMode::train);
      LossBreakdown parts;
      Var<float> loss = detection_loss(out, std::span<const std::vector<AnchorTarget>>(batch_targets),
                                       mc.num_classes, mc.anchors_per_location, {}, &parts);
      const double value = loss.value()[0];
      if (!std::isfinite(value)) throw NonFiniteLoss(state.step, epoch);
      optimizer.zero_grad();
      tape.backward(loss);
      clip_grad_norm<float>(optimizer.params(), config.grad_clip);
      optimizer.step(lr);
      ++state.step;
      ++batches;
      loss_sum += value;
      cls_sum += parts.classification;
      reg_sum += parts.regression;
    }
    state.epoch = epoch;

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.loss = batches > 0 ? loss_sum / static_cast<double>(batches) : 0.0;
    m.classification = batches > 0 ? cls_sum / static_cast<double>(batches) : 0.0;
    m.regression = batches > 0 ? reg_sum / static_cast<double>(batches) : 0.0;
    m.ap50 = std::numeric_limits<double>::quiet_NaN();
    if (test_data != nullptr && test_data->size() > 0 &&
        (config.eval_every_epoch || epoch == config.epochs))
      m.ap50 = evaluate(model, *test_data).map;
    m.seconds = seconds_since(start);
    history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return history;
}

std::vector<AblationRow> ablate(const Dataset& train_data, const Dataset& test_data,
                                const ModelConfig& base, const TrainConfig& config,
                                const std::function<void(const AblationRow&)>& on_row,
                                const EpochCallback& on_epoch) {
  struct Variant {
    const char* name;
    bool fu;
    bool bs_fpn;
  };
  const Variant variants[] = {{"baseline", false, false},
                              {"+F-ResNet", true, false},
                              {"+BS-FPN", false, true},
                              {"F-ResNet+BS-FPN", true, true}};
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    ModelConfig mc = base;
    mc.set_fu(v.fu);
    mc.bs_fpn = v.bs_fpn;
    const auto start = std::chrono::steady_clock::now();
    FFPFModel<float> model(mc, config.seed);
    Sgd<float> sgd(model.store(), config.momentum, config.weight_decay);
    TrainState state;
    AblationRow row;
    row.name = v.name;
    row.fu = v.fu;
    row.bs_fpn = v.bs_fpn;
    row.history = train(model, sgd, state, train_data, &test_data, config, on_epoch);
    row.ap50 = row.history.empty() ? evaluate(model, test_data).map : row.history.back().ap50;
    row.final_loss = row.history.empty() ? 0.0 : row.history.back().loss;
    row.seconds = seconds_since(start);
    rows.push_back(row);
    if (on_row) on_row(row);
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::string out = "configuration        F-ResNet  BS-FPN  AP@0.5   final loss\n";
  for (const auto& r : rows) {
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %-9s %-7s %7.4f  %10.5f\n", r.name.c_str(),
                  r.fu ? "yes" : "no", r.bs_fpn ? "yes" : "no", r.ap50, r.final_loss);
    out += line;
  }
  return out;
}

}  // namespace ffpf
