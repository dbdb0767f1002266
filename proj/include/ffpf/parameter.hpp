#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ffpf/tensor.hpp"

namespace ffpf {

/// A named model tensor. Non-trainable parameters hold buffers such as BN running statistics.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  void zero_grad() {
    if (grad.shape() == value.shape())
      grad.fill(T(0));
    else
      grad = Tensor<T>(value.shape());
  }
};

/// Owns every Parameter of a model. Addresses are stable for the lifetime of the store and
/// iteration follows registration order.
template <typename T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(std::string name, Tensor<T> value, bool trainable = true) {
    if (find(name) != nullptr)
      throw std::invalid_argument("ParameterStore: duplicate parameter name '" + name + "'");
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->value = std::move(value);
    p->trainable = trainable;
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }
  const Parameter<T>* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  Parameter<T>& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("ParameterStore: no parameter named '" + name + "'");
  }

  std::vector<Parameter<T>*> all() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<const Parameter<T>*> all() const {
    std::vector<const Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }
  std::vector<Parameter<T>*> trainable() {
    std::vector<Parameter<T>*> out;
    for (auto& p : params_)
      if (p->trainable) out.push_back(p.get());
    return out;
  }

  std::size_t size() const noexcept { return params_.size(); }

  void zero_grad() {
    for (auto& p : params_)
      if (p->trainable) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

}  // namespace ffpf
