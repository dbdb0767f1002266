#pragma once

#include <array>
#include <optional>
#include <vector>

#include "ffpf/config.hpp"
#include "ffpf/nn.hpp"
#include "ffpf/spectral.hpp"

namespace ffpf {

/// Feature maps for pyramid levels 2..5 (strides 4, 8, 16, 32).
template <typename T>
struct PyramidFeatures {
  std::array<Var<T>, 4> levels;

  Var<T>& at(int level) { return levels.at(static_cast<std::size_t>(level - 2)); }
  const Var<T>& at(int level) const { return levels.at(static_cast<std::size_t>(level - 2)); }
};

/// Basic block: conv3x3-BN-ReLU, conv3x3-BN, plus identity or 1x1-projected shortcut, then ReLU.
template <typename T>
struct ResidualBlock {
  ConvBnRelu<T> conv1;
  ConvBnRelu<T> conv2;
  std::optional<ConvBnRelu<T>> projection;

  static ResidualBlock create(ParameterStore<T>& store, const std::string& name, std::int64_t cin,
                              std::int64_t cout, int stride, Rng& rng);
};

template <typename T>
Var<T> residual_block(const Var<T>& input, const ResidualBlock<T>& params, NormMode mode);

/// Residual backbone whose stage outputs pass through Fourier Units when enabled.
template <typename T>
class FResNet {
 public:
  FResNet(ParameterStore<T>& store, const ModelConfig& config, Rng& rng);

  PyramidFeatures<T> forward(const Var<T>& image, NormMode mode) const;

  std::array<std::int64_t, 4> out_channels() const;

 private:
  struct Stage {
    std::vector<ResidualBlock<T>> blocks;
    // Entry b holds the unit applied after block b, if any.
    std::vector<std::optional<FourierUnitParams<T>>> units;
  };

  ModelConfig config_;
  ConvBnRelu<T> stem1_;
  ConvBnRelu<T> stem2_;
  std::array<Stage, 4> stages_;
};

/// Validates the input size, then runs the backbone. Inputs must be divisible by 32.
template <typename T>
PyramidFeatures<T> f_resnet_forward(const Var<T>& image, const FResNet<T>& backbone,
                                    NormMode mode);

}  // namespace ffpf
