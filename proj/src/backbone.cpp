#include "ffpf/backbone.hpp"

#include <string>

namespace ffpf {

template <typename T>
ResidualBlock<T> ResidualBlock<T>::create(ParameterStore<T>& store, const std::string& name,
                                          std::int64_t cin, std::int64_t cout, int stride,
                                          Rng& rng) {
  ResidualBlock<T> b{ConvBnRelu<T>::create(store, name + ".conv1", cin, cout, 3, stride, rng),
                     ConvBnRelu<T>::create(store, name + ".conv2", cout, cout, 3, 1, rng, false),
                     std::nullopt};
  if (cin != cout || stride != 1)
    b.projection = ConvBnRelu<T>::create(store, name + ".shortcut", cin, cout, 1, stride, rng, false);
  return b;
}

template <typename T>
Var<T> residual_block(const Var<T>& input, const ResidualBlock<T>& params, NormMode mode) {
  Var<T> y = params.conv2(params.conv1(input, mode), mode);
  Var<T> shortcut = params.projection ? (*params.projection)(input, mode) : input;
  if (!(shortcut.shape() == y.shape()))
    throw DimensionError("residual_block", "shortcut",
                         y.shape().str() + " vs " + shortcut.shape().str());
  return relu(add(y, shortcut));
}

template <typename T>
FResNet<T>::FResNet(ParameterStore<T>& store, const ModelConfig& config, Rng& rng)
    : config_(config) {
  config.validate();
  // Spectral weights draw from their own stream so the other parameters do not depend on
  // where units are placed.
  Rng fu_rng(rng.next());
  stem1_ = ConvBnRelu<T>::create(store, "backbone.stem1", config.in_channels, config.stem_channels,
                                 3, 2, rng);
  stem2_ = ConvBnRelu<T>::create(store, "backbone.stem2", config.stem_channels,
                                 config.stem_channels, 3, 2, rng);
  std::int64_t cin = config.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const StageSpec& spec = config.stages[s];
    const std::string prefix = "backbone.stage" + std::to_string(s + 2);
    Stage& stage = stages_[s];
    for (int b = 0; b < spec.blocks; ++b) {
      const std::string block_name = prefix + ".block" + std::to_string(b);
      stage.blocks.push_back(ResidualBlock<T>::create(store, block_name, cin, spec.channels,
                                                      b == 0 ? spec.stride : 1, rng));
      cin = spec.channels;
      const bool last = b + 1 == spec.blocks;
      const bool wanted = spec.fu_enabled &&
                          (config.fu_placement == FuPlacement::per_block || last);
      if (wanted) {
        const std::string fu_name =
            config.fu_placement == FuPlacement::per_block ? block_name + ".fu" : prefix + ".fu";
        stage.units.push_back(FourierUnitParams<T>::create(
            store, fu_name, spec.channels, config.fu_zero_init ? nullptr : &fu_rng));
      } else {
        stage.units.push_back(std::nullopt);
      }
    }
  }
}

template <typename T>
PyramidFeatures<T> FResNet<T>::forward(const Var<T>& image, NormMode mode) const {
  Var<T> x = stem2_(stem1_(image, mode), mode);
  PyramidFeatures<T> out;
  const SpectralConvOptions fu_options{mode, false, true};
  for (std::size_t s = 0; s < 4; ++s) {
    const Stage& stage = stages_[s];
    for (std::size_t b = 0; b < stage.blocks.size(); ++b) {
      x = residual_block(x, stage.blocks[b], mode);
      if (stage.units[b]) x = fourier_unit(x, *stage.units[b], fu_options);
    }
    out.levels[s] = x;
  }
  return out;
}

template <typename T>
std::array<std::int64_t, 4> FResNet<T>::out_channels() const {
  return {config_.stages[0].channels, config_.stages[1].channels, config_.stages[2].channels,
          config_.stages[3].channels};
}

template <typename T>
PyramidFeatures<T> f_resnet_forward(const Var<T>& image, const FResNet<T>& backbone,
                                    NormMode mode) {
  const Shape s = image.shape();
  if (s.h < 32 || s.h % 32 != 0)
    throw DimensionError("f_resnet_forward", "H", "height " + std::to_string(s.h) +
                                                      " is not a positive multiple of 32");
  if (s.w < 32 || s.w % 32 != 0)
    throw DimensionError("f_resnet_forward", "W", "width " + std::to_string(s.w) +
                                                      " is not a positive multiple of 32");
  return backbone.forward(image, mode);
}

#define FFPF_INSTANTIATE_BACKBONE(T)                                                          \
  template struct ResidualBlock<T>;                                                           \
  template Var<T> residual_block(const Var<T>&, const ResidualBlock<T>&, NormMode);           \
  template class FResNet<T>;                                                                  \
  template PyramidFeatures<T> f_resnet_forward(const Var<T>&, const FResNet<T>&, NormMode);

FFPF_INSTANTIATE_BACKBONE(float)
FFPF_INSTANTIATE_BACKBONE(double)

}  // namespace ffpf
