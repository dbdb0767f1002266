#pragma once

#include <array>
#include <optional>

#include "ffpf/backbone.hpp"

namespace ffpf {

/// Content-aware reassembly upsampler (factor 2): a 1x1 channel compressor and a k_enc x k_enc
/// encoder predict one k_up x k_up kernel per output location.
template <typename T>
struct CarafeParams {
  int k_up = 5;
  int k_enc = 3;
  std::int64_t c_mid = 16;
  Conv2d<T> compressor;
  Conv2d<T> encoder;

  static CarafeParams create(ParameterStore<T>& store, const std::string& name,
                             std::int64_t channels, int k_up, int k_enc, std::int64_t c_mid,
                             Rng& rng);
};

/// Softmax-normalized reassembly kernels [N, k_up^2, 2H, 2W].
template <typename T>
Var<T> carafe_kernels(const Var<T>& input, const CarafeParams<T>& params);

/// out[n,c,y,x] = sum_{i,j} kernels[n, i*k+j, y, x] * input[n, c, y/2 + i - r, x/2 + j - r],
/// zero outside the input.
template <typename T>
Var<T> carafe_reassemble(const Var<T>& input, const Var<T>& kernels, int k_up);

template <typename T>
Var<T> carafe_upsample(const Var<T>& input, const CarafeParams<T>& params);

/// Channel attention: T1 is 3x3 conv-BN-ReLU, T2 is a 1x1 conv on the pooled vector.
template <typename T>
struct CamParams {
  ConvBnRelu<T> t1;
  Conv2d<T> t2;

  static CamParams create(ParameterStore<T>& store, const std::string& name,
                          std::int64_t channels, Rng& rng);
};

/// Z_i = GAP(T1 G_i). Exposed separately so tests can check the pooled statistic.
template <typename T>
Var<T> cam_pooled(const Var<T>& g, const CamParams<T>& params, NormMode mode);

/// S_i = sigmoid(T2 Z_i), shape [N, C, 1, 1], every entry in (0, 1).
template <typename T>
Var<T> cam(const Var<T>& g, const CamParams<T>& params, NormMode mode);

/// U_i = conv(G_i + upsample(U_{i+1})); with no U_{i+1} (top level) U_i = conv(G_i).
template <typename T>
Var<T> top_down_step(const Var<T>& g, const std::optional<Var<T>>& u_next, const Conv2d<T>& conv,
                     const CarafeParams<T>* upsampler);

/// B_{i+1} = conv(U_{i+1} + downsample(B_i)), downsample a learned 3x3 stride-2 conv.
template <typename T>
Var<T> bottom_up_step(const Var<T>& u_next, const Var<T>& b, const Conv2d<T>& downsample,
                      const Conv2d<T>& conv);

/// Bilateral spectral-aware pyramid: laterals, top-down with carafe, bottom-up with strided
/// conv, CAM-gated skip fusion L_i = B_i + S_i * G_i. Parameters are per level and per path.
template <typename T>
struct BsFpnParams {
  std::array<Conv2d<T>, 4> lateral;
  std::array<Conv2d<T>, 4> top_down;
  std::array<CarafeParams<T>, 3> upsample;  // index i-2 upsamples U_{i+1} into level i
  std::array<Conv2d<T>, 3> downsample;      // index i-2 downsamples B_i into level i+1
  std::array<Conv2d<T>, 3> bottom_up;       // index i-2 produces B_{i+1}
  std::array<CamParams<T>, 4> cam;
  bool skip_uses_lateral = true;

  static BsFpnParams create(ParameterStore<T>& store, const ModelConfig& config,
                            const std::array<std::int64_t, 4>& in_channels, Rng& rng);
};

/// Intermediate maps of one BS-FPN pass, for inspection.
template <typename T>
struct BsFpnTrace {
  PyramidFeatures<T> lateral;
  PyramidFeatures<T> top_down;
  PyramidFeatures<T> bottom_up;
  std::array<Var<T>, 4> gates;
  PyramidFeatures<T> out;
};

template <typename T>
BsFpnTrace<T> bs_fpn_trace(const PyramidFeatures<T>& g, const BsFpnParams<T>& params,
                           NormMode mode);

template <typename T>
PyramidFeatures<T> bs_fpn_forward(const PyramidFeatures<T>& g, const BsFpnParams<T>& params,
                                  NormMode mode);

/// Plain top-down FPN used as the ablation baseline neck: lateral 1x1, nearest 2x upsampling
/// and addition, then a 3x3 output conv per level.
template <typename T>
struct FpnParams {
  std::array<Conv2d<T>, 4> lateral;
  std::array<Conv2d<T>, 4> output;

  static FpnParams create(ParameterStore<T>& store, const ModelConfig& config,
                          const std::array<std::int64_t, 4>& in_channels, Rng& rng);
};

template <typename T>
PyramidFeatures<T> fpn_forward(const PyramidFeatures<T>& g, const FpnParams<T>& params);

}  // namespace ffpf
