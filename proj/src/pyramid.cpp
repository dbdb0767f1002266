#include "ffpf/pyramid.hpp"

#include <string>

namespace ffpf {

template <typename T>
CarafeParams<T> CarafeParams<T>::create(ParameterStore<T>& store, const std::string& name,
                                        std::int64_t channels, int k_up, int k_enc,
                                        std::int64_t c_mid, Rng& rng) {
  CarafeParams p;
  p.k_up = k_up;
  p.k_enc = k_enc;
  p.c_mid = c_mid;
  p.compressor = Conv2d<T>::create(store, name + ".compressor", channels, c_mid, 1, 1, true, rng);
  // Near-zero encoder weights start the upsampler close to a uniform local average.
  p.encoder = Conv2d<T>::create(store, name + ".encoder", c_mid, 4 * k_up * k_up, k_enc, 1, true,
                                rng, Init::normal, 0.001);
  return p;
}

template <typename T>
Var<T> carafe_kernels(const Var<T>& input, const CarafeParams<T>& params) {
  Var<T> logits = params.encoder(params.compressor(input));
  return softmax_channels(pixel_shuffle(logits, 2));
}

template <typename T>
Var<T> carafe_reassemble(const Var<T>& input, const Var<T>& kernels, int k_up) {
  const Shape xs = input.shape();
  const Shape ks = kernels.shape();
  const std::int64_t taps = static_cast<std::int64_t>(k_up) * k_up;
  if (k_up < 1 || k_up % 2 == 0)
    throw DimensionError("carafe_reassemble", "k_up", "kernel size must be odd");
  if (ks.n != xs.n) throw DimensionError("carafe_reassemble", "N", xs.n, ks.n);
  if (ks.c != taps) throw DimensionError("carafe_reassemble", "C", taps, ks.c);
  if (ks.h != 2 * xs.h) throw DimensionError("carafe_reassemble", "H", 2 * xs.h, ks.h);
  if (ks.w != 2 * xs.w) throw DimensionError("carafe_reassemble", "W", 2 * xs.w, ks.w);

  const std::int64_t r = k_up / 2;
  const std::int64_t oh = ks.h;
  const std::int64_t ow = ks.w;
  // Visits every (tap, output location) whose source lies inside the input.
  auto for_each_tap = [=](auto&& fn) {
    for (std::int64_t i = 0; i < k_up; ++i)
      for (std::int64_t j = 0; j < k_up; ++j) {
        const std::int64_t t = i * k_up + j;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t sy = y / 2 + i - r;
          if (sy < 0 || sy >= xs.h) continue;
          for (std::int64_t x = 0; x < ow; ++x) {
            const std::int64_t sx = x / 2 + j - r;
            if (sx < 0 || sx >= xs.w) continue;
            fn(t, y * ow + x, sy * xs.w + sx);
          }
        }
      }
  };

  Tensor<T> out(Shape{xs.n, xs.c, oh, ow});
  for (std::int64_t n = 0; n < xs.n; ++n) {
    const T* k = kernels.value().plane(n, 0);
    for (std::int64_t c = 0; c < xs.c; ++c) {
      const T* src = input.value().plane(n, c);
      T* dst = out.plane(n, c);
      for_each_tap([&](std::int64_t t, std::int64_t o, std::int64_t s) {
        dst[o] += k[t * oh * ow + o] * src[s];
      });
    }
  }
  return input.tape().record(
      std::move(out), {input, kernels}, [for_each_tap, oh, ow](const BackwardArgs<T>& a) {
        const Tensor<T>& x = *a.in_values[0];
        const Tensor<T>& kv = *a.in_values[1];
        const Shape xs = x.shape();
        for (std::int64_t n = 0; n < xs.n; ++n) {
          const T* k = kv.plane(n, 0);
          T* gk = a.in_grads[1] != nullptr ? a.in_grads[1]->plane(n, 0) : nullptr;
          for (std::int64_t c = 0; c < xs.c; ++c) {
            const T* g = a.out_grad.plane(n, c);
            const T* src = x.plane(n, c);
            T* gx = a.in_grads[0] != nullptr ? a.in_grads[0]->plane(n, c) : nullptr;
            for_each_tap([&](std::int64_t t, std::int64_t o, std::int64_t s) {
              if (gx != nullptr) gx[s] += k[t * oh * ow + o] * g[o];
              if (gk != nullptr) gk[t * oh * ow + o] += g[o] * src[s];
            });
          }
        }
      });
}

template <typename T>
Var<T> carafe_upsample(const Var<T>& input, const CarafeParams<T>& params) {
  return carafe_reassemble(input, carafe_kernels(input, params), params.k_up);
}

template <typename T>
CamParams<T> CamParams<T>::create(ParameterStore<T>& store, const std::string& name,
                                  std::int64_t channels, Rng& rng) {
  return CamParams{ConvBnRelu<T>::create(store, name + ".t1", channels, channels, 3, 1, rng),
                   Conv2d<T>::create(store, name + ".t2", channels, channels, 1, 1, true, rng)};
}

template <typename T>
Var<T> cam_pooled(const Var<T>& g, const CamParams<T>& params, NormMode mode) {
  return global_avg_pool(params.t1(g, mode));
}

template <typename T>
Var<T> cam(const Var<T>& g, const CamParams<T>& params, NormMode mode) {
  return sigmoid(params.t2(cam_pooled(g, params, mode)));
}

template <typename T>
Var<T> top_down_step(const Var<T>& g, const std::optional<Var<T>>& u_next, const Conv2d<T>& conv,
                     const CarafeParams<T>* upsampler) {
  if (!u_next) return conv(g);
  if (upsampler == nullptr)
    throw std::invalid_argument("top_down_step: an upsampler is required below the top level");
  Var<T> up = carafe_upsample(*u_next, *upsampler);
  if (up.shape().h != g.shape().h)
    throw DimensionError("top_down_step", "H", g.shape().h, up.shape().h);
  if (up.shape().w != g.shape().w)
    throw DimensionError("top_down_step", "W", g.shape().w, up.shape().w);
  return conv(add(g, up));
}

template <typename T>
Var<T> bottom_up_step(const Var<T>& u_next, const Var<T>& b, const Conv2d<T>& downsample,
                      const Conv2d<T>& conv) {
  Var<T> down = downsample(b);
  if (down.shape().h != u_next.shape().h)
    throw DimensionError("bottom_up_step", "H", u_next.shape().h, down.shape().h);
  if (down.shape().w != u_next.shape().w)
    throw DimensionError("bottom_up_step", "W", u_next.shape().w, down.shape().w);
  return conv(add(u_next, down));
}

template <typename T>
BsFpnParams<T> BsFpnParams<T>::create(ParameterStore<T>& store, const ModelConfig& config,
                                      const std::array<std::int64_t, 4>& in_channels, Rng& rng) {
  BsFpnParams p;
  const std::int64_t c = config.fpn_channels;
  p.skip_uses_lateral = config.skip_uses_lateral;
  for (int i = 0; i < 4; ++i) {
    const std::string level = std::to_string(i + 2);
    p.lateral[i] = Conv2d<T>::create(store, "neck.lateral" + level, in_channels[i], c, 1, 1, true,
                                     rng, Init::lecun_normal);
    p.top_down[i] = Conv2d<T>::create(store, "neck.top_down" + level, c, c, 1, 1, true, rng,
                                      Init::lecun_normal);
  }
  for (int i = 0; i < 3; ++i) {
    const std::string level = std::to_string(i + 2);
    p.upsample[i] = CarafeParams<T>::create(store, "neck.carafe" + level, c, config.carafe_k_up,
                                            config.carafe_k_enc, config.carafe_c_mid, rng);
    p.downsample[i] = Conv2d<T>::create(store, "neck.downsample" + level, c, c, 3, 2, false, rng,
                                        Init::lecun_normal);
    p.bottom_up[i] =
        Conv2d<T>::create(store, "neck.bottom_up" + std::to_string(i + 3), c, c, 1, 1, true, rng,
                          Init::lecun_normal);
  }
  for (int i = 0; i < 4; ++i) {
    const std::int64_t width = config.skip_uses_lateral ? c : in_channels[i];
    p.cam[i] = CamParams<T>::create(store, "neck.cam" + std::to_string(i + 2), width, rng);
  }
  return p;
}

template <typename T>
BsFpnTrace<T> bs_fpn_trace(const PyramidFeatures<T>& g, const BsFpnParams<T>& params,
                           NormMode mode) {
  BsFpnTrace<T> t;
  for (int i = 0; i < 4; ++i) t.lateral.levels[i] = params.lateral[i](g.levels[i]);

  t.top_down.levels[3] = top_down_step<T>(t.lateral.levels[3], std::nullopt, params.top_down[3], nullptr);
  for (int i = 2; i >= 0; --i)
    t.top_down.levels[i] = top_down_step<T>(t.lateral.levels[i], t.top_down.levels[i + 1],
                                            params.top_down[i], &params.upsample[i]);

  t.bottom_up.levels[0] = t.top_down.levels[0];
  for (int i = 0; i < 3; ++i)
    t.bottom_up.levels[i + 1] = bottom_up_step(t.top_down.levels[i + 1], t.bottom_up.levels[i],
                                               params.downsample[i], params.bottom_up[i]);

  for (int i = 0; i < 4; ++i) {
    const Var<T>& skip = params.skip_uses_lateral ? t.lateral.levels[i] : g.levels[i];
    t.gates[i] = cam(skip, params.cam[i], mode);
    t.out.levels[i] = add(t.bottom_up.levels[i], mul_channel(t.gates[i], skip));
  }
  return t;
}

template <typename T>
PyramidFeatures<T> bs_fpn_forward(const PyramidFeatures<T>& g, const BsFpnParams<T>& params,
                                  NormMode mode) {
  return bs_fpn_trace(g, params, mode).out;
}

template <typename T>
FpnParams<T> FpnParams<T>::create(ParameterStore<T>& store, const ModelConfig& config,
                                  const std::array<std::int64_t, 4>& in_channels, Rng& rng) {
  FpnParams p;
  const std::int64_t c = config.fpn_channels;
  for (int i = 0; i < 4; ++i) {
    const std::string level = std::to_string(i + 2);
    p.lateral[i] = Conv2d<T>::create(store, "neck.lateral" + level, in_channels[i], c, 1, 1, true,
                                     rng, Init::lecun_normal);
    p.output[i] = Conv2d<T>::create(store, "neck.output" + level, c, c, 3, 1, true, rng,
                                    Init::lecun_normal);
  }
  return p;
}

template <typename T>
PyramidFeatures<T> fpn_forward(const PyramidFeatures<T>& g, const FpnParams<T>& params) {
  std::array<Var<T>, 4> merged;
  merged[3] = params.lateral[3](g.levels[3]);
  for (int i = 2; i >= 0; --i)
    merged[i] = add(params.lateral[i](g.levels[i]), upsample_nearest2x(merged[i + 1]));
  PyramidFeatures<T> out;
  for (int i = 0; i < 4; ++i) out.levels[i] = params.output[i](merged[i]);
  return out;
}

#define FFPF_INSTANTIATE_PYRAMID(T)                                                            \
  template struct CarafeParams<T>;                                                             \
  template Var<T> carafe_kernels(const Var<T>&, const CarafeParams<T>&);                       \
  template Var<T> carafe_reassemble(const Var<T>&, const Var<T>&, int);                        \
  template Var<T> carafe_upsample(const Var<T>&, const CarafeParams<T>&);                      \
  template struct CamParams<T>;                                                                \
  template Var<T> cam_pooled(const Var<T>&, const CamParams<T>&, NormMode);                    \
  template Var<T> cam(const Var<T>&, const CamParams<T>&, NormMode);                           \
  template Var<T> top_down_step(const Var<T>&, const std::optional<Var<T>>&, const Conv2d<T>&, \
                                const CarafeParams<T>*);                                       \
  template Var<T> bottom_up_step(const Var<T>&, const Var<T>&, const Conv2d<T>&,               \
                                 const Conv2d<T>&);                                            \
  template struct BsFpnParams<T>;                                                              \
  template BsFpnTrace<T> bs_fpn_trace(const PyramidFeatures<T>&, const BsFpnParams<T>&,        \
                                      NormMode);                                               \
  template PyramidFeatures<T> bs_fpn_forward(const PyramidFeatures<T>&, const BsFpnParams<T>&, \
                                             NormMode);                                        \
  template struct FpnParams<T>;                                                                \
  template PyramidFeatures<T> fpn_forward(const PyramidFeatures<T>&, const FpnParams<T>&);

FFPF_INSTANTIATE_PYRAMID(float)
FFPF_INSTANTIATE_PYRAMID(double)

}  // namespace ffpf
