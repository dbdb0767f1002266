#include "ffpf/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>

namespace ffpf {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require(bool ok, const std::string& op, const char* axis, std::int64_t expected,
             std::int64_t actual) {
  if (!ok) throw DimensionError(op, axis, expected, actual);
}

void require_same_shape(const std::string& op, const Shape& a, const Shape& b) {
  require(a.n == b.n, op, "N", a.n, b.n);
  require(a.c == b.c, op, "C", a.c, b.c);
  require(a.h == b.h, op, "H", a.h, b.h);
  require(a.w == b.w, op, "W", a.w, b.w);
}

template <typename T>
void add_into(std::span<const T> src, std::span<T> dst) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

struct ConvGeom {
  std::int64_t cin, h, w, k, stride, pad, ho, wo;
  std::int64_t rows() const { return cin * k * k; }
  std::int64_t cols() const { return ho * wo; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    const T* plane = x + ci * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride + ky - g.pad;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = plane + iy * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride + kx - g.pad;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* x) {
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    T* plane = x + ci * g.h * g.w;
    for (std::int64_t ky = 0; ky < g.k; ++ky) {
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * g.cols();
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = plane + iy * g.w;
          const T* src = row + oy * g.wo;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void load_columns(const T* x, const ConvGeom& g, RowMat<T>& col) {
  if (g.pointwise())
    std::copy_n(x, col.size(), col.data());
  else
    im2col(x, g, col.data());
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, const std::optional<Var<T>>& bias,
              int stride, int pad) {
  const std::string op = "conv2d";
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  require(ws.c == xs.c, op, "Cin", ws.c, xs.c);
  require(ws.h == ws.w, op, "k", ws.h, ws.w);
  if (ws.h % 2 != 1) throw DimensionError(op, "k", "kernel size must be odd");
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
  if (bias) {
    const Shape bs = bias->shape();
    require(bs.numel() == ws.n && bs.c == ws.n, op, "bias", ws.n, bs.c);
  }
  const ConvGeom g{xs.c, xs.h, xs.w, ws.h, stride, pad, conv_out_extent(xs.h, ws.h, stride, pad),
                   conv_out_extent(xs.w, ws.h, stride, pad)};
  if (g.ho < 1 || g.wo < 1)
    throw DimensionError(op, "H", "kernel larger than padded input " + xs.str());

  const std::int64_t cout = ws.n;
  Tensor<T> out(Shape{xs.n, cout, g.ho, g.wo});
  // Products run on Eigen-owned buffers only. Eigen peels unaligned heads differently depending
  // on the address, which would make results depend on where a tensor happens to live.
  const RowMat<T> wmat = ConstMapMat<T>(weight.value().data(), cout, g.rows());
  RowMat<T> col(g.rows(), g.cols());
  RowMat<T> prod(cout, g.cols());
  for (std::int64_t n = 0; n < xs.n; ++n) {
    load_columns(input.value().plane(n, 0), g, col);
    prod.noalias() = wmat * col;
    T* on = out.plane(n, 0);
    std::copy_n(prod.data(), prod.size(), on);
    if (bias) {
      const T* b = bias->value().data();
      for (std::int64_t c = 0; c < cout; ++c)
        for (std::int64_t i = 0; i < g.cols(); ++i) on[c * g.cols() + i] += b[c];
    }
  }

  std::vector<Var<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  return input.tape().record(
      std::move(out), std::span<const Var<T>>(inputs), [g, cout](const BackwardArgs<T>& a) {
        const Tensor<T>& x = *a.in_values[0];
        const std::int64_t batch = x.shape().n;
        const RowMat<T> wmat = ConstMapMat<T>(a.in_values[1]->data(), cout, g.rows());
        RowMat<T> col(g.rows(), g.cols());
        RowMat<T> gout(cout, g.cols());
        RowMat<T> gw_acc;
        if (a.in_grads[1] != nullptr) gw_acc = RowMat<T>::Zero(cout, g.rows());
        for (std::int64_t n = 0; n < batch; ++n) {
          std::copy_n(a.out_grad.plane(n, 0), gout.size(), gout.data());
          if (a.in_grads[1] != nullptr) {
            load_columns(x.plane(n, 0), g, col);
            gw_acc.noalias() += gout * col.transpose();
          }
          if (Tensor<T>* gx = a.in_grads[0]) {
            col.noalias() = wmat.transpose() * gout;
            if (g.pointwise())
              add_into<T>(std::span<const T>(col.data(), static_cast<std::size_t>(col.size())),
                          std::span<T>(gx->plane(n, 0), static_cast<std::size_t>(col.size())));
            else
              col2im_add(col.data(), g, gx->plane(n, 0));
          }
          if (a.in_grads.size() > 2 && a.in_grads[2] != nullptr) {
            T* gb = a.in_grads[2]->data();
            for (std::int64_t c = 0; c < cout; ++c) {
              T acc = 0;
              for (std::int64_t i = 0; i < g.cols(); ++i) acc += gout(c, i);
              gb[c] += acc;
            }
          }
        }
        if (Tensor<T>* gw = a.in_grads[1])
          add_into<T>(std::span<const T>(gw_acc.data(), static_cast<std::size_t>(gw_acc.size())),
                      gw->values());
      });
}

template <typename T>
Var<T> batch_norm(const Var<T>& input, const Var<T>& gamma, const Var<T>& beta, NormMode mode,
                  RunningStats<T> stats, T eps) {
  const std::string op = "batch_norm";
  const Shape xs = input.shape();
  require(gamma.shape().numel() == xs.c, op, "C", xs.c, gamma.shape().numel());
  require(beta.shape().numel() == xs.c, op, "C", xs.c, beta.shape().numel());
  if (!(eps > T(0))) throw std::invalid_argument("batch_norm: eps must be positive");
  const std::int64_t count = xs.n * xs.plane();
  if (count == 0) throw DimensionError(op, "H", "empty reduction extent");
  if (mode == NormMode::eval && (stats.mean == nullptr || stats.var == nullptr))
    throw std::invalid_argument("batch_norm: eval mode requires running statistics");

  const Tensor<T>& x = input.value();
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  std::vector<T> mean(static_cast<std::size_t>(xs.c)), invstd(static_cast<std::size_t>(xs.c));
  Tensor<T> out(xs);
  for (std::int64_t c = 0; c < xs.c; ++c) {
    T mu;
    T var;
    if (mode == NormMode::train) {
      T s = 0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = x.plane(n, c);
        for (std::int64_t i = 0; i < xs.plane(); ++i) s += p[i];
      }
      mu = s / static_cast<T>(count);
      T ss = 0;
      for (std::int64_t n = 0; n < xs.n; ++n) {
        const T* p = x.plane(n, c);
        for (std::int64_t i = 0; i < xs.plane(); ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<T>(count);
      if (stats.mean != nullptr && stats.var != nullptr) {
        const T m = stats.momentum;
        const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
        (*stats.mean)[c] = (T(1) - m) * (*stats.mean)[c] + m * mu;
        (*stats.var)[c] = (T(1) - m) * (*stats.var)[c] + m * unbiased;
      }
    } else {
      mu = (*stats.mean)[c];
      var = (*stats.var)[c];
    }
    const T is = T(1) / std::sqrt(var + eps);
    mean[static_cast<std::size_t>(c)] = mu;
    invstd[static_cast<std::size_t>(c)] = is;
    const T a = gm[c] * is;
    const T b = bt[c];
    for (std::int64_t n = 0; n < xs.n; ++n) {
      const T* p = x.plane(n, c);
      T* q = out.plane(n, c);
      for (std::int64_t i = 0; i < xs.plane(); ++i) q[i] = (p[i] - mu) * a + b;
    }
  }

  return input.tape().record(
      std::move(out), {input, gamma, beta},
      [mean = std::move(mean), invstd = std::move(invstd), mode](const BackwardArgs<T>& a) {
        const Tensor<T>& x = *a.in_values[0];
        const T* gm = a.in_values[1]->data();
        const Shape s = x.shape();
        const T count = static_cast<T>(s.n * s.plane());
        for (std::int64_t c = 0; c < s.c; ++c) {
          const T mu = mean[static_cast<std::size_t>(c)];
          const T is = invstd[static_cast<std::size_t>(c)];
          T sum_g = 0;
          T sum_gx = 0;
          for (std::int64_t n = 0; n < s.n; ++n) {
            const T* p = x.plane(n, c);
            const T* g = a.out_grad.plane(n, c);
            for (std::int64_t i = 0; i < s.plane(); ++i) {
              sum_g += g[i];
              sum_gx += g[i] * (p[i] - mu) * is;
            }
          }
          if (a.in_grads[1] != nullptr) (*a.in_grads[1])[c] += sum_gx;
          if (a.in_grads[2] != nullptr) (*a.in_grads[2])[c] += sum_g;
          if (Tensor<T>* gx = a.in_grads[0]) {
            const T k = gm[c] * is;
            const T mg = sum_g / count;
            const T mgx = sum_gx / count;
            for (std::int64_t n = 0; n < s.n; ++n) {
              const T* p = x.plane(n, c);
              const T* g = a.out_grad.plane(n, c);
              T* q = gx->plane(n, c);
              if (mode == NormMode::train) {
                for (std::int64_t i = 0; i < s.plane(); ++i)
                  q[i] += k * (g[i] - mg - (p[i] - mu) * is * mgx);
              } else {
                for (std::int64_t i = 0; i < s.plane(); ++i) q[i] += k * g[i];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  const Tensor<T>& in = x.value();
  Tensor<T> out(in.shape());
  for (std::int64_t i = 0; i < in.numel(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  Tape<T>& tape = x.tape();
  if (tape.track_kinks()) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::int64_t i = 0; i < in.numel(); ++i) h = (h ^ (in[i] > T(0) ? 1u : 0u)) * 0x100000001b3ULL;
    tape.mix_kink(h);
  }
  return tape.record(std::move(out), {x}, [](const BackwardArgs<T>& a) {
    const Tensor<T>& in = *a.in_values[0];
    Tensor<T>& g = *a.in_grads[0];
    for (std::int64_t i = 0; i < in.numel(); ++i)
      if (in[i] > T(0)) g[i] += a.out_grad[i];
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  const Tensor<T>& in = x.value();
  Tensor<T> out(in.shape());
  for (std::int64_t i = 0; i < in.numel(); ++i) {
    const T v = in[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return x.tape().record(std::move(out), {x}, [](const BackwardArgs<T>& a) {
    Tensor<T>& g = *a.in_grads[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const T y = a.out_value[i];
      g[i] += a.out_grad[i] * y * (T(1) - y);
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape("add", a.shape(), b.shape());
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
  return a.tape().record(std::move(out), {a, b}, [](const BackwardArgs<T>& args) {
    for (Tensor<T>* g : args.in_grads)
      if (g != nullptr) add_into<T>(args.out_grad.values(), g->values());
  });
}

template <typename T>
Var<T> mul_channel(const Var<T>& gate, const Var<T>& x) {
  const std::string op = "mul_channel";
  const Shape gs = gate.shape();
  const Shape xs = x.shape();
  require(gs.n == xs.n, op, "N", xs.n, gs.n);
  require(gs.c == xs.c, op, "C", xs.c, gs.c);
  require(gs.h == 1, op, "H", 1, gs.h);
  require(gs.w == 1, op, "W", 1, gs.w);
  Tensor<T> out(xs);
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t c = 0; c < xs.c; ++c) {
      const T s = gate.value()[n * xs.c + c];
      const T* p = x.value().plane(n, c);
      T* q = out.plane(n, c);
      for (std::int64_t i = 0; i < xs.plane(); ++i) q[i] = s * p[i];
    }
  return x.tape().record(std::move(out), {gate, x}, [](const BackwardArgs<T>& a) {
    const Tensor<T>& s = *a.in_values[0];
    const Tensor<T>& x = *a.in_values[1];
    const Shape xs = x.shape();
    for (std::int64_t n = 0; n < xs.n; ++n)
      for (std::int64_t c = 0; c < xs.c; ++c) {
        const T* g = a.out_grad.plane(n, c);
        const T* p = x.plane(n, c);
        if (a.in_grads[0] != nullptr) {
          T acc = 0;
          for (std::int64_t i = 0; i < xs.plane(); ++i) acc += g[i] * p[i];
          (*a.in_grads[0])[n * xs.c + c] += acc;
        }
        if (a.in_grads[1] != nullptr) {
          const T sv = s[n * xs.c + c];
          T* q = a.in_grads[1]->plane(n, c);
          for (std::int64_t i = 0; i < xs.plane(); ++i) q[i] += sv * g[i];
        }
      }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * factor;
  return x.tape().record(std::move(out), {x}, [factor](const BackwardArgs<T>& a) {
    Tensor<T>& g = *a.in_grads[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += factor * a.out_grad[i];
  });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape xs = x.shape();
  if (xs.plane() < 1) throw DimensionError("global_avg_pool", "H", "empty spatial extent");
  Tensor<T> out(Shape{xs.n, xs.c, 1, 1});
  const T inv = T(1) / static_cast<T>(xs.plane());
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t c = 0; c < xs.c; ++c) {
      const T* p = x.value().plane(n, c);
      T s = 0;
      for (std::int64_t i = 0; i < xs.plane(); ++i) s += p[i];
      out[n * xs.c + c] = s * inv;
    }
  return x.tape().record(std::move(out), {x}, [inv](const BackwardArgs<T>& a) {
    Tensor<T>& g = *a.in_grads[0];
    const Shape s = g.shape();
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T v = a.out_grad[n * s.c + c] * inv;
        T* q = g.plane(n, c);
        for (std::int64_t i = 0; i < s.plane(); ++i) q[i] += v;
      }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const std::string op = "concat_channels";
  const Shape as = a.shape();
  const Shape bs = b.shape();
  require(as.n == bs.n, op, "N", as.n, bs.n);
  require(as.h == bs.h, op, "H", as.h, bs.h);
  require(as.w == bs.w, op, "W", as.w, bs.w);
  Tensor<T> out(Shape{as.n, as.c + bs.c, as.h, as.w});
  const std::int64_t pa = as.c * as.plane();
  const std::int64_t pb = bs.c * bs.plane();
  for (std::int64_t n = 0; n < as.n; ++n) {
    std::copy_n(a.value().data() + n * pa, pa, out.data() + n * (pa + pb));
    std::copy_n(b.value().data() + n * pb, pb, out.data() + n * (pa + pb) + pa);
  }
  return a.tape().record(std::move(out), {a, b}, [pa, pb](const BackwardArgs<T>& args) {
    const std::int64_t batch = args.out_grad.shape().n;
    for (std::int64_t n = 0; n < batch; ++n) {
      const T* g = args.out_grad.data() + n * (pa + pb);
      if (args.in_grads[0] != nullptr) {
        T* q = args.in_grads[0]->data() + n * pa;
        for (std::int64_t i = 0; i < pa; ++i) q[i] += g[i];
      }
      if (args.in_grads[1] != nullptr) {
        T* q = args.in_grads[1]->data() + n * pb;
        for (std::int64_t i = 0; i < pb; ++i) q[i] += g[pa + i];
      }
    }
  });
}

namespace {

template <typename T>
Var<T> slice_channels(const Var<T>& x, std::int64_t begin, std::int64_t end) {
  const Shape xs = x.shape();
  const std::int64_t plane = xs.plane();
  const std::int64_t width = end - begin;
  Tensor<T> out(Shape{xs.n, width, xs.h, xs.w});
  for (std::int64_t n = 0; n < xs.n; ++n)
    std::copy_n(x.value().plane(n, begin), width * plane, out.plane(n, 0));
  return x.tape().record(std::move(out), {x}, [begin, width, plane](const BackwardArgs<T>& a) {
    Tensor<T>& g = *a.in_grads[0];
    for (std::int64_t n = 0; n < g.shape().n; ++n) {
      const T* src = a.out_grad.plane(n, 0);
      T* dst = g.plane(n, begin);
      for (std::int64_t i = 0; i < width * plane; ++i) dst[i] += src[i];
    }
  });
}

}  // namespace

template <typename T>
std::pair<Var<T>, Var<T>> split_channels(const Var<T>& x, std::int64_t at) {
  const std::int64_t c = x.shape().c;
  if (at <= 0 || at >= c)
    throw DimensionError("split_channels", "C",
                         "split point " + std::to_string(at) + " outside (0, " + std::to_string(c) + ")");
  return {slice_channels(x, 0, at), slice_channels(x, at, c)};
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  return x.tape().record(Tensor<T>(Shape{1, 1, 1, 1}, s), {x}, [](const BackwardArgs<T>& a) {
    const T g = a.out_grad[0];
    for (T& v : a.in_grads[0]->values()) v += g;
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights) {
  require_same_shape("weighted_sum", x.shape(), weights.shape());
  T s = 0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) s += weights[i] * x.value()[i];
  return x.tape().record(Tensor<T>(Shape{1, 1, 1, 1}, s), {x},
                         [weights](const BackwardArgs<T>& a) {
                           const T g = a.out_grad[0];
                           Tensor<T>& gx = *a.in_grads[0];
                           for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * weights[i];
                         });
}

template <typename T>
Var<T> upsample_nearest2x(const Var<T>& x) {
  const Shape xs = x.shape();
  Tensor<T> out(Shape{xs.n, xs.c, xs.h * 2, xs.w * 2});
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t c = 0; c < xs.c; ++c) {
      const T* p = x.value().plane(n, c);
      T* q = out.plane(n, c);
      for (std::int64_t y = 0; y < xs.h * 2; ++y)
        for (std::int64_t z = 0; z < xs.w * 2; ++z) q[y * xs.w * 2 + z] = p[(y / 2) * xs.w + z / 2];
    }
  return x.tape().record(std::move(out), {x}, [](const BackwardArgs<T>& a) {
    Tensor<T>& g = *a.in_grads[0];
    const Shape s = g.shape();
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T* src = a.out_grad.plane(n, c);
        T* dst = g.plane(n, c);
        for (std::int64_t y = 0; y < s.h * 2; ++y)
          for (std::int64_t z = 0; z < s.w * 2; ++z) dst[(y / 2) * s.w + z / 2] += src[y * s.w * 2 + z];
      }
  });
}

template <typename T>
Var<T> softmax_channels(const Var<T>& x) {
  const Shape xs = x.shape();
  if (xs.c < 1) throw DimensionError("softmax_channels", "C", "no channels");
  const std::int64_t plane = xs.plane();
  Tensor<T> out(xs);
  for (std::int64_t n = 0; n < xs.n; ++n) {
    const T* p = x.value().plane(n, 0);
    T* q = out.plane(n, 0);
    for (std::int64_t i = 0; i < plane; ++i) {
      T m = p[i];
      for (std::int64_t c = 1; c < xs.c; ++c) m = std::max(m, p[c * plane + i]);
      T s = 0;
      for (std::int64_t c = 0; c < xs.c; ++c) {
        const T e = std::exp(p[c * plane + i] - m);
        q[c * plane + i] = e;
        s += e;
      }
      const T inv = T(1) / s;
      for (std::int64_t c = 0; c < xs.c; ++c) q[c * plane + i] *= inv;
    }
  }
  return x.tape().record(std::move(out), {x}, [](const BackwardArgs<T>& a) {
    const Shape s = a.out_value.shape();
    const std::int64_t plane = s.plane();
    for (std::int64_t n = 0; n < s.n; ++n) {
      const T* y = a.out_value.plane(n, 0);
      const T* g = a.out_grad.plane(n, 0);
      T* q = a.in_grads[0]->plane(n, 0);
      for (std::int64_t i = 0; i < plane; ++i) {
        T dot = 0;
        for (std::int64_t c = 0; c < s.c; ++c) dot += y[c * plane + i] * g[c * plane + i];
        for (std::int64_t c = 0; c < s.c; ++c)
          q[c * plane + i] += y[c * plane + i] * (g[c * plane + i] - dot);
      }
    }
  });
}

template <typename T>
Var<T> pixel_shuffle(const Var<T>& x, int r) {
  const Shape xs = x.shape();
  const std::int64_t rr = static_cast<std::int64_t>(r) * r;
  if (r < 1 || xs.c % rr != 0)
    throw DimensionError("pixel_shuffle", "C", "channel count not divisible by r*r");
  const std::int64_t co = xs.c / rr;
  const Shape os{xs.n, co, xs.h * r, xs.w * r};
  auto index = [xs, os, r, rr](std::int64_t n, std::int64_t c, std::int64_t sy, std::int64_t sx,
                               std::int64_t y, std::int64_t z, std::int64_t& src,
                               std::int64_t& dst) {
    src = ((n * xs.c + c * rr + sy * r + sx) * xs.h + y) * xs.w + z;
    dst = ((n * os.c + c) * os.h + y * r + sy) * os.w + z * r + sx;
  };
  auto visit = [xs, co, r, index](auto&& fn) {
    for (std::int64_t n = 0; n < xs.n; ++n)
      for (std::int64_t c = 0; c < co; ++c)
        for (std::int64_t sy = 0; sy < r; ++sy)
          for (std::int64_t sx = 0; sx < r; ++sx)
            for (std::int64_t y = 0; y < xs.h; ++y)
              for (std::int64_t z = 0; z < xs.w; ++z) {
                std::int64_t src = 0;
                std::int64_t dst = 0;
                index(n, c, sy, sx, y, z, src, dst);
                fn(src, dst);
              }
  };
  Tensor<T> out(os);
  const Tensor<T>& in = x.value();
  visit([&](std::int64_t src, std::int64_t dst) { out[dst] = in[src]; });
  return x.tape().record(std::move(out), {x}, [visit](const BackwardArgs<T>& a) {
    Tensor<T>& g = *a.in_grads[0];
    visit([&](std::int64_t src, std::int64_t dst) { g[src] += a.out_grad[dst]; });
  });
}

#define FFPF_INSTANTIATE_OPS(T)                                                                 \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, int, int);  \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, NormMode,             \
                             RunningStats<T>, T);                                               \
  template Var<T> relu(const Var<T>&);                                                          \
  template Var<T> sigmoid(const Var<T>&);                                                       \
  template Var<T> add(const Var<T>&, const Var<T>&);                                            \
  template Var<T> mul_channel(const Var<T>&, const Var<T>&);                                    \
  template Var<T> scale(const Var<T>&, T);                                                      \
  template Var<T> global_avg_pool(const Var<T>&);                                               \
  template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                \
  template std::pair<Var<T>, Var<T>> split_channels(const Var<T>&, std::int64_t);               \
  template Var<T> sum(const Var<T>&);                                                           \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                                \
  template Var<T> upsample_nearest2x(const Var<T>&);                                            \
  template Var<T> softmax_channels(const Var<T>&);                                              \
  template Var<T> pixel_shuffle(const Var<T>&, int);

FFPF_INSTANTIATE_OPS(float)
FFPF_INSTANTIATE_OPS(double)

}  // namespace ffpf
