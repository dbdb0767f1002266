#include "ffpf/fft.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>

#include "ffpf/parallel.hpp"

namespace ffpf::fft {
namespace {

template <typename T>
std::complex<T> unit_root(double angle) {
  return {static_cast<T>(std::cos(angle)), static_cast<T>(std::sin(angle))};
}

}  // namespace

template <typename T>
Plan<T>::Plan(std::size_t n) : n_(n) {
  if (n == 0)
    throw std::invalid_argument(std::string("fft: unsupported size 0; supported sizes: ") +
                                kSupportedSizes);
  if (is_power_of_two(n)) {
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    bitrev_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      bitrev_[i] = r;
    }
    twiddles_.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k)
      twiddles_[k] = unit_root<T>(-2.0 * std::numbers::pi * static_cast<double>(k) /
                                  static_cast<double>(n));
    return;
  }

  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  inner_ = &plan_for<T>(m);
  chirp_.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    // k^2 mod 2n keeps the angle small for large k.
    const std::size_t k2 = (k * k) % (2 * n);
    chirp_[k] = unit_root<T>(-std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n));
  }
  chirp_filter_.assign(m, std::complex<T>(0));
  chirp_filter_[0] = std::conj(chirp_[0]);
  for (std::size_t k = 1; k < n; ++k) {
    chirp_filter_[k] = std::conj(chirp_[k]);
    chirp_filter_[m - k] = std::conj(chirp_[k]);
  }
  inner_->forward(chirp_filter_.data());
}

template <typename T>
void Plan<T>::radix2(std::complex<T>* data) const {
  for (std::size_t i = 0; i < n_; ++i)
    if (i < bitrev_[i]) std::swap(data[i], data[bitrev_[i]]);
  for (std::size_t len = 2; len <= n_; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t step = n_ / len;
    for (std::size_t start = 0; start < n_; start += len) {
      for (std::size_t j = 0; j < half; ++j) {
        const std::complex<T> w = twiddles_[j * step];
        const std::complex<T> u = data[start + j];
        const std::complex<T> v = data[start + j + half] * w;
        data[start + j] = u + v;
        data[start + j + half] = u - v;
      }
    }
  }
}

template <typename T>
void Plan<T>::bluestein(std::complex<T>* data) const {
  const std::size_t m = inner_->size();
  std::vector<std::complex<T>> buf(m, std::complex<T>(0));
  for (std::size_t k = 0; k < n_; ++k) buf[k] = data[k] * chirp_[k];
  inner_->forward(buf.data());
  for (std::size_t k = 0; k < m; ++k) buf[k] *= chirp_filter_[k];
  inner_->inverse(buf.data());
  const T inv_m = T(1) / static_cast<T>(m);
  for (std::size_t k = 0; k < n_; ++k) data[k] = buf[k] * chirp_[k] * inv_m;
}

template <typename T>
void Plan<T>::forward(std::complex<T>* data) const {
  if (inner_ == nullptr)
    radix2(data);
  else
    bluestein(data);
}

template <typename T>
void Plan<T>::inverse(std::complex<T>* data) const {
  for (std::size_t i = 0; i < n_; ++i) data[i] = std::conj(data[i]);
  forward(data);
  for (std::size_t i = 0; i < n_; ++i) data[i] = std::conj(data[i]);
}

template <typename T>
const Plan<T>& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<Plan<T>>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return *it->second;
  auto plan = std::make_unique<Plan<T>>(n);
  const Plan<T>& ref = *plan;
  cache.emplace(n, std::move(plan));
  return ref;
}

template <typename T>
SpectrumData<T> rfft2(const Tensor<T>& input) {
  const Shape s = input.shape();
  if (s.h < 1 || s.w < 1)
    throw std::invalid_argument("rfft2: unsupported spatial size " + s.str() +
                                "; supported sizes: " + kSupportedSizes);
  const std::int64_t wf = half_width(s.w);
  SpectrumData<T> out{Tensor<T>(Shape{s.n, s.c, s.h, wf}), Tensor<T>(Shape{s.n, s.c, s.h, wf}),
                      s.w};
  parallel_for(s.n * s.c, [&](std::int64_t slice) {
    const Plan<T>& row_plan = plan_for<T>(static_cast<std::size_t>(s.w));
    const Plan<T>& col_plan = plan_for<T>(static_cast<std::size_t>(s.h));
    const std::int64_t n = slice / s.c;
    const std::int64_t c = slice % s.c;
    const T* x = input.plane(n, c);
    std::vector<std::complex<T>> half(static_cast<std::size_t>(s.h * wf));
    std::vector<std::complex<T>> row(static_cast<std::size_t>(s.w));
    for (std::int64_t y = 0; y < s.h; ++y) {
      for (std::int64_t z = 0; z < s.w; ++z) row[static_cast<std::size_t>(z)] = x[y * s.w + z];
      row_plan.forward(row.data());
      std::copy_n(row.begin(), wf, half.begin() + y * wf);
    }
    std::vector<std::complex<T>> col(static_cast<std::size_t>(s.h));
    T* re = out.real.plane(n, c);
    T* im = out.imag.plane(n, c);
    for (std::int64_t v = 0; v < wf; ++v) {
      for (std::int64_t y = 0; y < s.h; ++y) col[static_cast<std::size_t>(y)] = half[static_cast<std::size_t>(y * wf + v)];
      col_plan.forward(col.data());
      for (std::int64_t y = 0; y < s.h; ++y) {
        re[y * wf + v] = col[static_cast<std::size_t>(y)].real();
        im[y * wf + v] = col[static_cast<std::size_t>(y)].imag();
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> irfft2(const SpectrumData<T>& spectrum) {
  const Shape s = spectrum.real.shape();
  if (!(spectrum.imag.shape() == s))
    throw DimensionError("irfft2", "imag", "real/imag shapes " + s.str() + " and " +
                                               spectrum.imag.shape().str() + " differ");
  if (spectrum.source_width < 1 || half_width(spectrum.source_width) != s.w)
    throw DimensionError("irfft2", "W",
                         "source width " + std::to_string(spectrum.source_width) +
                             " inconsistent with " + std::to_string(s.w) + " stored bins");
  if (s.h < 1)
    throw std::invalid_argument(std::string("irfft2: unsupported size; supported sizes: ") +
                                kSupportedSizes);
  const std::int64_t width = spectrum.source_width;
  const std::int64_t wf = s.w;
  Tensor<T> out(Shape{s.n, s.c, s.h, width});
  const T norm = T(1) / static_cast<T>(s.h * width);
  parallel_for(s.n * s.c, [&](std::int64_t slice) {
    const Plan<T>& row_plan = plan_for<T>(static_cast<std::size_t>(width));
    const Plan<T>& col_plan = plan_for<T>(static_cast<std::size_t>(s.h));
    const std::int64_t n = slice / s.c;
    const std::int64_t c = slice % s.c;
    const T* re = spectrum.real.plane(n, c);
    const T* im = spectrum.imag.plane(n, c);
    std::vector<std::complex<T>> half(static_cast<std::size_t>(s.h * wf));
    std::vector<std::complex<T>> col(static_cast<std::size_t>(s.h));
    for (std::int64_t v = 0; v < wf; ++v) {
      for (std::int64_t y = 0; y < s.h; ++y)
        col[static_cast<std::size_t>(y)] = {re[y * wf + v], im[y * wf + v]};
      col_plan.inverse(col.data());
      for (std::int64_t y = 0; y < s.h; ++y) half[static_cast<std::size_t>(y * wf + v)] = col[static_cast<std::size_t>(y)];
    }
    std::vector<std::complex<T>> row(static_cast<std::size_t>(width));
    T* dst = out.plane(n, c);
    for (std::int64_t y = 0; y < s.h; ++y) {
      const std::complex<T>* h = half.data() + y * wf;
      for (std::int64_t v = 0; v < wf; ++v) row[static_cast<std::size_t>(v)] = h[v];
      for (std::int64_t v = wf; v < width; ++v) row[static_cast<std::size_t>(v)] = std::conj(h[width - v]);
      row_plan.inverse(row.data());
      for (std::int64_t z = 0; z < width; ++z) dst[y * width + z] = row[static_cast<std::size_t>(z)].real() * norm;
    }
  });
  return out;
}

template class Plan<float>;
template class Plan<double>;
template const Plan<float>& plan_for(std::size_t);
template const Plan<double>& plan_for(std::size_t);
template SpectrumData<float> rfft2(const Tensor<float>&);
template SpectrumData<double> rfft2(const Tensor<double>&);
template Tensor<float> irfft2(const SpectrumData<float>&);
template Tensor<double> irfft2(const SpectrumData<double>&);

}  // namespace ffpf::fft
