#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "ffpf/backbone.hpp"
#include "ffpf/detect.hpp"
#include "ffpf/pyramid.hpp"

namespace ffpf {

/// Backbone, neck (BS-FPN or plain FPN) and detection head sharing one parameter store.
template <typename T>
class FFPFModel {
 public:
  FFPFModel(const ModelConfig& config, std::uint64_t seed);
  FFPFModel(const FFPFModel&) = delete;
  FFPFModel& operator=(const FFPFModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  PyramidFeatures<T> features(const Var<T>& image, NormMode mode) const;
  HeadOutputs<T> forward(const Var<T>& image, NormMode mode) const;

  /// Eval-mode inference without a gradient tape; one detection list per image.
  std::vector<std::vector<BoxDetection>> predict(const Tensor<T>& images,
                                                 const NmsOptions& options = {}) const;

  const std::vector<Anchor>& anchors(std::int64_t h, std::int64_t w) const;

  /// Copies every tensor by name from a model with the same configuration.
  template <typename U>
  void copy_from(const FFPFModel<U>& other) {
    for (Parameter<T>* p : store_.all()) {
      const Parameter<U>* q = other.store().find(p->name);
      if (q == nullptr || !(q->value.shape() == p->value.shape()))
        throw std::invalid_argument("FFPFModel::copy_from: missing or mismatched '" + p->name + "'");
      p->value = q->value.template cast<T>();
    }
  }

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  std::unique_ptr<FResNet<T>> backbone_;
  std::optional<BsFpnParams<T>> bs_fpn_;
  std::optional<FpnParams<T>> fpn_;
  DetectionHead<T> head_;
  mutable std::int64_t anchor_h_ = -1;
  mutable std::int64_t anchor_w_ = -1;
  mutable std::vector<Anchor> anchors_;
};

}  // namespace ffpf
