#pragma once

#include <optional>
#include <utility>

#include "ffpf/autodiff.hpp"

namespace ffpf {

enum class NormMode { train, eval };

/// Running statistics updated by batch_norm in train mode and read in eval mode.
/// Null pointers mean "no running statistics" (train mode only).
template <typename T>
struct RunningStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
  T momentum = T(0.1);
};

inline constexpr double kBatchNormEps = 1e-5;

/// Zero-padded cross-correlation. weight is [Cout, Cin, k, k] with k odd; bias, when given,
/// is [1, Cout, 1, 1].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              int stride, int pad);

/// Per-channel batch normalization. gamma and beta are [1, C, 1, 1].
template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, NormMode mode,
                  RunningStats<T> stats, T eps = T(kBatchNormEps));

/// Subgradient at exactly 0 is 0.
template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

/// Equal shapes only.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

/// gate [N,C,1,1] times x [N,C,H,W]. No other broadcast pattern is accepted.
template <typename T>
Var<T> mul_channel(const Var<T>& gate, const Var<T>& x);

template <typename T>
Var<T> scale(const Var<T>& x, T factor);

/// Mean over H and W, giving [N,C,1,1].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x);

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

/// Splits channels [0, at) and [at, C).
template <typename T>
std::pair<Var<T>, Var<T>> split_channels(const Var<T>& x, std::int64_t at);

/// Sum of every element as a [1,1,1,1] scalar.
template <typename T>
Var<T> sum(const Var<T>& x);

/// Weighted sum Σ w·x with a constant weight tensor of the same shape; handy for gradient checks.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x);

/// Softmax across the channel axis at each (n, h, w).
template <typename T>
Var<T> softmax_channels(const Var<T>& x);

/// [N, C*r*r, H, W] -> [N, C, H*r, W*r], channel c*r*r + sy*r + sx lands at (y*r+sy, x*r+sx).
template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int r);

/// Output spatial extent of a convolution.
constexpr std::int64_t conv_out_extent(std::int64_t in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace ffpf
