#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "ffpf/tensor.hpp"

namespace ffpf::fft {

/// Human-readable statement of which transform lengths are accepted.
inline constexpr const char* kSupportedSizes =
    "any extent >= 1 (radix-2 for powers of two, Bluestein chirp-z otherwise)";

constexpr bool is_power_of_two(std::size_t n) noexcept { return n != 0 && (n & (n - 1)) == 0; }

/// In-place 1-D complex DFT of a fixed length. Both directions are unnormalized; the forward
/// direction uses exp(-2*pi*i*k*j/n).
template <typename T>
class Plan {
 public:
  explicit Plan(std::size_t n);

  std::size_t size() const noexcept { return n_; }
  void forward(std::complex<T>* data) const;
  void inverse(std::complex<T>* data) const;

 private:
  void radix2(std::complex<T>* data) const;
  void bluestein(std::complex<T>* data) const;

  std::size_t n_ = 0;
  std::vector<std::size_t> bitrev_;
  std::vector<std::complex<T>> twiddles_;
  // Bluestein state: chirp and the transformed conjugate chirp of padded length m.
  std::vector<std::complex<T>> chirp_;
  std::vector<std::complex<T>> chirp_filter_;
  const Plan* inner_ = nullptr;
};

/// Shared plan for length n; plans are built once per thread and never freed.
template <typename T>
const Plan<T>& plan_for(std::size_t n);

/// Half-spectrum produced by a real 2-D transform: [N, C, H, floor(W/2)+1].
template <typename T>
struct SpectrumData {
  Tensor<T> real;
  Tensor<T> imag;
  std::int64_t source_width = 0;
};

constexpr std::int64_t half_width(std::int64_t w) noexcept { return w / 2 + 1; }

/// Unnormalized forward real 2-D DFT over (H, W) of each (n, c) slice.
template <typename T>
SpectrumData<T> rfft2(const Tensor<T>& input);

/// Inverse of rfft2, scaled by 1/(H*W). Imaginary parts of self-conjugate bins are ignored.
template <typename T>
Tensor<T> irfft2(const SpectrumData<T>& spectrum);

}  // namespace ffpf::fft
