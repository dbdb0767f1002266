#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ffpf/config.hpp"
#include "ffpf/parameter.hpp"
#include "ffpf/autodiff.hpp"

namespace ffpf {

struct GradCheckOptions {
  double step = 1e-3;
  // Coordinates probed per tensor; tensors with at most this many entries are probed fully.
  int max_coords = 32;
  // Each time a probe crosses a ReLU or smooth-L1 branch the step is divided by 10.
  int max_shrink = 4;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  // max over tensors of ||analytic - numeric||_inf / max(||analytic||_inf, ||numeric||_inf, 1e-8),
  // norms taken over the probed coordinates of that tensor
  double max_rel_error = 0;
  // largest elementwise |a - n| / max(|a|, |n|, 1e-8), reported for information
  double max_elementwise_error = 0;
  std::string worst;  // tensor and coordinate behind max_rel_error
  std::int64_t checked = 0;
  std::int64_t skipped = 0;  // probes that kept crossing a branch at every step size
  bool finite = true;

  bool passed(double threshold) const { return finite && max_rel_error < threshold; }
};

/// Builds a scalar loss from the tape and leaf handles of the perturbed inputs.
template <typename T>
using LossBuilder = std::function<Var<T>(Tape<T>&, std::span<const Var<T>>)>;

/// Compares reverse-mode gradients with a four-point finite-difference stencil, perturbing each
/// input tensor and the values of `params` in place (restored afterwards).
template <typename T>
GradCheckResult finite_diff_check(const LossBuilder<T>& loss, std::span<Tensor<T>> inputs,
                                  std::span<Parameter<T>* const> params = {},
                                  const GradCheckOptions& options = {});

/// Projects a tensor-valued op onto a fixed random direction so it can be checked as a scalar.
template <typename T>
using TensorOp = std::function<Var<T>(Tape<T>&, std::span<const Var<T>>)>;

template <typename T>
LossBuilder<T> projected(TensorOp<T> op, std::uint64_t seed);

struct GradCheckEntry {
  std::string name;
  GradCheckResult result;
  double threshold = 0;
  bool passed() const { return result.passed(threshold); }
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double seconds = 0;

  bool passed() const;
  std::string format() const;
};

/// 64-bit checks of every differentiable op and of the end-to-end detection loss of `config`
/// on 2x3x64x64 inputs, with and without Fourier Units.
GradCheckReport grad_check_suite(const ModelConfig& config, std::uint64_t seed);

}  // namespace ffpf
