#include "ffpf/spectral.hpp"

namespace ffpf {
namespace {

// Packed layout [N, 2C, H, Wf]: real channels first, then imaginary.
template <typename T>
Tensor<T> pack(const Tensor<T>& re, const Tensor<T>& im) {
  const Shape s = re.shape();
  Tensor<T> out(Shape{s.n, 2 * s.c, s.h, s.w});
  const std::int64_t block = s.c * s.plane();
  for (std::int64_t n = 0; n < s.n; ++n) {
    std::copy_n(re.plane(n, 0), block, out.plane(n, 0));
    std::copy_n(im.plane(n, 0), block, out.plane(n, s.c));
  }
  return out;
}

template <typename T>
fft::SpectrumData<T> unpack(const Tensor<T>& packed, std::int64_t source_width) {
  const Shape p = packed.shape();
  const std::int64_t c = p.c / 2;
  fft::SpectrumData<T> out{Tensor<T>(Shape{p.n, c, p.h, p.w}), Tensor<T>(Shape{p.n, c, p.h, p.w}),
                           source_width};
  const std::int64_t block = c * p.plane();
  for (std::int64_t n = 0; n < p.n; ++n) {
    std::copy_n(packed.plane(n, 0), block, out.real.plane(n, 0));
    std::copy_n(packed.plane(n, c), block, out.imag.plane(n, 0));
  }
  return out;
}

// Multiplicity of half-spectrum column v in the full Hermitian spectrum.
constexpr int column_weight(std::int64_t v, std::int64_t width) {
  return (v == 0 || (width % 2 == 0 && v == width / 2)) ? 1 : 2;
}

}  // namespace

template <typename T>
ComplexSpectrum<T> rfft2(const Var<T>& x) {
  const std::int64_t width = x.shape().w;
  fft::SpectrumData<T> spec = fft::rfft2(x.value());
  const std::int64_t channels = x.shape().c;
  Var<T> packed = x.tape().record(
      pack(spec.real, spec.imag), {x}, [width](const BackwardArgs<T>& a) {
        // d/dx of the forward DFT is Re(sum_k G_k e^{+i theta}); expressed through irfft2 by
        // undoing its column weights and 1/(HW) factor.
        fft::SpectrumData<T> g = unpack(a.out_grad, width);
        const Shape s = g.real.shape();
        for (std::int64_t n = 0; n < s.n; ++n)
          for (std::int64_t c = 0; c < s.c; ++c)
            for (std::int64_t y = 0; y < s.h; ++y)
              for (std::int64_t v = 0; v < s.w; ++v) {
                const T inv = T(1) / static_cast<T>(column_weight(v, width));
                g.real.at(n, c, y, v) *= inv;
                g.imag.at(n, c, y, v) *= inv;
              }
        Tensor<T> gx = fft::irfft2(g);
        const T hw = static_cast<T>(s.h * width);
        Tensor<T>& dst = *a.in_grads[0];
        for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] += gx[i] * hw;
      });
  auto [re, im] = split_channels(packed, channels);
  return ComplexSpectrum<T>{re, im, width};
}

template <typename T>
Var<T> irfft2(const ComplexSpectrum<T>& spectrum) {
  const Shape s = spectrum.real.shape();
  if (!(spectrum.imag.shape() == s))
    throw DimensionError("irfft2", "imag", "real/imag shapes differ");
  const std::int64_t width = spectrum.source_width;
  Var<T> packed = concat_channels(spectrum.real, spectrum.imag);
  Tensor<T> out = fft::irfft2(unpack(packed.value(), width));
  return packed.tape().record(std::move(out), {packed}, [width](const BackwardArgs<T>& a) {
    fft::SpectrumData<T> g = fft::rfft2(a.out_grad);
    const Shape s = g.real.shape();
    const T inv_hw = T(1) / static_cast<T>(s.h * width);
    Tensor<T>& dst = *a.in_grads[0];
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c)
        for (std::int64_t y = 0; y < s.h; ++y)
          for (std::int64_t v = 0; v < s.w; ++v) {
            const T k = static_cast<T>(column_weight(v, width)) * inv_hw;
            dst.at(n, c, y, v) += k * g.real.at(n, c, y, v);
            dst.at(n, s.c + c, y, v) += k * g.imag.at(n, c, y, v);
          }
  });
}

template <typename T>
ComplexSpectrum<T> complex_multiply(const ComplexSpectrum<T>& a, const ComplexSpectrum<T>& b) {
  if (!(a.shape() == b.shape()))
    throw DimensionError("complex_multiply", "shape", a.shape().str() + " vs " + b.shape().str());
  if (a.source_width != b.source_width)
    throw DimensionError("complex_multiply", "W", a.source_width, b.source_width);
  Var<T> pa = concat_channels(a.real, a.imag);
  Var<T> pb = concat_channels(b.real, b.imag);
  const Shape s = a.shape();
  const std::int64_t block = s.c * s.plane();
  Tensor<T> out(pa.shape());
  for (std::int64_t n = 0; n < s.n; ++n) {
    const T* x = pa.value().plane(n, 0);
    const T* y = pb.value().plane(n, 0);
    T* z = out.plane(n, 0);
    for (std::int64_t i = 0; i < block; ++i) {
      z[i] = x[i] * y[i] - x[block + i] * y[block + i];
      z[block + i] = x[i] * y[block + i] + x[block + i] * y[i];
    }
  }
  Var<T> prod = pa.tape().record(std::move(out), {pa, pb}, [block](const BackwardArgs<T>& args) {
    const Tensor<T>& x = *args.in_values[0];
    const Tensor<T>& y = *args.in_values[1];
    for (std::int64_t n = 0; n < x.shape().n; ++n) {
      const T* g = args.out_grad.plane(n, 0);
      const T* xp = x.plane(n, 0);
      const T* yp = y.plane(n, 0);
      // z = x*y; dL/dx = g * conj(y) in the real-pair sense, symmetric for y.
      if (Tensor<T>* gx = args.in_grads[0]) {
        T* q = gx->plane(n, 0);
        for (std::int64_t i = 0; i < block; ++i) {
          q[i] += g[i] * yp[i] + g[block + i] * yp[block + i];
          q[block + i] += -g[i] * yp[block + i] + g[block + i] * yp[i];
        }
      }
      if (Tensor<T>* gy = args.in_grads[1]) {
        T* q = gy->plane(n, 0);
        for (std::int64_t i = 0; i < block; ++i) {
          q[i] += g[i] * xp[i] + g[block + i] * xp[block + i];
          q[block + i] += -g[i] * xp[block + i] + g[block + i] * xp[i];
        }
      }
    }
  });
  auto [re, im] = split_channels(prod, s.c);
  return ComplexSpectrum<T>{re, im, a.source_width};
}

template <typename T>
ComplexSpectrum<T> spectral_conv(const ComplexSpectrum<T>& spectrum,
                                 const FourierUnitParams<T>& params,
                                 const SpectralConvOptions& options) {
  const std::int64_t c = spectrum.shape().c;
  if (params.channels() != c)
    throw DimensionError("spectral_conv", "C", params.channels(), c);
  Tape<T>& tape = spectrum.real.tape();
  Var<T> stacked = concat_channels(spectrum.real, spectrum.imag);
  Var<T> y = conv2d(stacked, tape.parameter(*params.weight), std::optional<Var<T>>{}, 1, 0);
  if (!options.bypass_norm) y = params.bn(y, options.mode);
  if (options.activation) y = relu(y);
  auto [re, im] = split_channels(y, c);
  return ComplexSpectrum<T>{re, im, spectrum.source_width};
}

template <typename T>
Var<T> fourier_unit(const Var<T>& x, const FourierUnitParams<T>& params,
                    const SpectralConvOptions& options) {
  return add(irfft2(spectral_conv(rfft2(x), params, options)), x);
}

#define FFPF_INSTANTIATE_SPECTRAL(T)                                                            \
  template ComplexSpectrum<T> rfft2(const Var<T>&);                                             \
  template Var<T> irfft2(const ComplexSpectrum<T>&);                                            \
  template ComplexSpectrum<T> complex_multiply(const ComplexSpectrum<T>&,                       \
                                               const ComplexSpectrum<T>&);                      \
  template ComplexSpectrum<T> spectral_conv(const ComplexSpectrum<T>&,                          \
                                            const FourierUnitParams<T>&,                        \
                                            const SpectralConvOptions&);                        \
  template Var<T> fourier_unit(const Var<T>&, const FourierUnitParams<T>&,                      \
                               const SpectralConvOptions&);

FFPF_INSTANTIATE_SPECTRAL(float)
FFPF_INSTANTIATE_SPECTRAL(double)

}  // namespace ffpf
