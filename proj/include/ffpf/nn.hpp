#pragma once

#include <cmath>
#include <optional>
#include <string>

#include "ffpf/ops.hpp"
#include "ffpf/parameter.hpp"
#include "ffpf/random.hpp"

namespace ffpf {

/// normal draws N(0, init_std^2).
// kaiming_normal: std sqrt(2 / fan_in), for convs feeding a ReLU; lecun_normal: std sqrt(1 / fan_in),
// for convs with a linear output.
enum class Init { kaiming_normal, lecun_normal, normal, zeros };

inline Shape channel_vector(std::int64_t c) { return Shape{1, c, 1, 1}; }

/// Learnable convolution: a weight [Cout, Cin, k, k] and optional bias living in a store.
template <typename T>
struct Conv2d {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  int stride = 1;
  int pad = 0;

  static Conv2d create(ParameterStore<T>& store, const std::string& name, std::int64_t cin,
                       std::int64_t cout, int k, int stride, bool with_bias, Rng& rng,
                       Init init = Init::kaiming_normal, double init_std = 0.01) {
    Tensor<T> w(Shape{cout, cin, k, k});
    if (init != Init::zeros) {
      const auto fan_in = static_cast<double>(cin * k * k);
      const double std_dev = init == Init::kaiming_normal ? std::sqrt(2.0 / fan_in)
                             : init == Init::lecun_normal ? std::sqrt(1.0 / fan_in)
                                                          : init_std;
      for (auto& v : w.values()) v = static_cast<T>(rng.normal() * std_dev);
    }
    Conv2d conv;
    conv.weight = &store.add(name + ".weight", std::move(w));
    if (with_bias) conv.bias = &store.add(name + ".bias", Tensor<T>(channel_vector(cout)));
    conv.stride = stride;
    conv.pad = k / 2;
    return conv;
  }

  Var<T> operator()(const Var<T>& x) const {
    Tape<T>& tape = x.tape();
    std::optional<Var<T>> b;
    if (bias != nullptr) b = tape.parameter(*bias);
    return conv2d(x, tape.parameter(*weight), b, stride, pad);
  }
};

template <typename T>
struct BatchNorm2d {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;
  T momentum = T(0.1);
  T eps = T(kBatchNormEps);

  static BatchNorm2d create(ParameterStore<T>& store, const std::string& name, std::int64_t c) {
    BatchNorm2d bn;
    bn.gamma = &store.add(name + ".gamma", Tensor<T>(channel_vector(c), T(1)));
    bn.beta = &store.add(name + ".beta", Tensor<T>(channel_vector(c)));
    bn.running_mean = &store.add(name + ".running_mean", Tensor<T>(channel_vector(c)), false);
    bn.running_var = &store.add(name + ".running_var", Tensor<T>(channel_vector(c), T(1)), false);
    return bn;
  }

  Var<T> operator()(const Var<T>& x, NormMode mode) const {
    Tape<T>& tape = x.tape();
    return batch_norm(x, tape.parameter(*gamma), tape.parameter(*beta), mode,
                      RunningStats<T>{&running_mean->value, &running_var->value, momentum}, eps);
  }
};

/// conv (bias-free) -> BN -> optional ReLU.
template <typename T>
struct ConvBnRelu {
  Conv2d<T> conv;
  BatchNorm2d<T> bn;
  bool activation = true;

  static ConvBnRelu create(ParameterStore<T>& store, const std::string& name, std::int64_t cin,
                           std::int64_t cout, int k, int stride, Rng& rng, bool activation = true,
                           Init init = Init::kaiming_normal) {
    return ConvBnRelu{Conv2d<T>::create(store, name + ".conv", cin, cout, k, stride, false, rng, init),
                      BatchNorm2d<T>::create(store, name + ".bn", cout), activation};
  }

  Var<T> operator()(const Var<T>& x, NormMode mode) const {
    Var<T> y = bn(conv(x), mode);
    return activation ? relu(y) : y;
  }
};

}  // namespace ffpf
