#pragma once

#include <string>

#include "ffpf/autodiff.hpp"
#include "ffpf/fft.hpp"
#include "ffpf/nn.hpp"

namespace ffpf {

/// Real and imaginary half-spectra of a real feature map, each [N, C, H, floor(W/2)+1].
template <typename T>
struct ComplexSpectrum {
  Var<T> real;
  Var<T> imag;
  std::int64_t source_width = 0;

  const Shape& shape() const { return real.shape(); }
};

/// Differentiable forward real 2-D FFT. The backward rule is the adjoint transform.
template <typename T>
ComplexSpectrum<T> rfft2(const Var<T>& x);

/// Differentiable inverse real 2-D FFT, output [N, C, H, source_width].
template <typename T>
Var<T> irfft2(const ComplexSpectrum<T>& spectrum);

/// Pointwise complex product of two spectra of identical shape.
template <typename T>
ComplexSpectrum<T> complex_multiply(const ComplexSpectrum<T>& a, const ComplexSpectrum<T>& b);

/// Weights of the frequency-domain conv-BN-ReLU acting on the stacked [real; imag] channels.
/// The 1x1 weight is bias-free and never mixes frequency bins.
template <typename T>
struct FourierUnitParams {
  Parameter<T>* weight = nullptr;  // [2C, 2C, 1, 1]
  BatchNorm2d<T> bn;               // 2C channels

  std::int64_t channels() const { return weight->value.shape().n / 2; }

  /// Without `rng` the spectral weights are zero and the unit is an exact identity;
  /// with it they are kaiming-normal.
  static FourierUnitParams create(ParameterStore<T>& store, const std::string& name,
                                  std::int64_t channels, Rng* rng = nullptr) {
    FourierUnitParams p;
    Tensor<T> w(Shape{2 * channels, 2 * channels, 1, 1});
    if (rng != nullptr)
      for (auto& v : w.values())
        v = static_cast<T>(rng->normal() * std::sqrt(1.0 / static_cast<double>(channels)));
    p.weight = &store.add(name + ".spectral_conv.weight", std::move(w));
    p.bn = BatchNorm2d<T>::create(store, name + ".spectral_bn", 2 * channels);
    return p;
  }
};

struct SpectralConvOptions {
  NormMode mode = NormMode::train;
  bool bypass_norm = false;  // skip BN entirely (testing the linear path)
  bool activation = true;
};

/// Cat(real, imag) -> 1x1 conv -> BN -> ReLU -> split back into (real, imag).
template <typename T>
ComplexSpectrum<T> spectral_conv(const ComplexSpectrum<T>& spectrum,
                                 const FourierUnitParams<T>& params,
                                 const SpectralConvOptions& options = {});

/// irfft2(spectral_conv(rfft2(x))) + x. Output shape equals input shape.
template <typename T>
Var<T> fourier_unit(const Var<T>& x, const FourierUnitParams<T>& params,
                    const SpectralConvOptions& options = {});

}  // namespace ffpf
