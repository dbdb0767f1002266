#include "ffpf/grad_check.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ffpf/model.hpp"

namespace ffpf {
namespace {

template <typename T>
struct Probe {
  std::string name;
  Tensor<T>* value;
  Tensor<T> analytic;
};

// Half the probes go to the entries with the largest analytic gradient, so sparse gradients
// (box regression, boundary frequency bins) are exercised; the rest are drawn at random.
template <typename T>
std::vector<std::int64_t> pick_coords(const Tensor<T>& analytic, int max_coords,
                                      std::uint64_t seed) {
  const std::int64_t numel = analytic.numel();
  std::vector<std::int64_t> all(static_cast<std::size_t>(numel));
  std::iota(all.begin(), all.end(), std::int64_t{0});
  if (max_coords < 0 || numel <= max_coords) return all;
  const auto top = static_cast<std::size_t>(max_coords / 2);
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top), all.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      const T x = std::abs(analytic[a]);
                      const T y = std::abs(analytic[b]);
                      return x != y ? x > y : a < b;
                    });
  Rng rng(seed);
  for (auto i = static_cast<std::int64_t>(top); i < max_coords; ++i)
    std::swap(all[static_cast<std::size_t>(i)],
              all[static_cast<std::size_t>(rng.integer(i, numel - 1))]);
  all.resize(static_cast<std::size_t>(max_coords));
  std::sort(all.begin(), all.end());
  return all;
}

Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.values()) v = rng.normal() * scale;
  return t;
}

// Keeps samples at least `margin` away from zero so ReLU-type kinks are never straddled.
Tensor<double> randn_away_from_zero(Shape s, Rng& rng, double margin = 0.1) {
  Tensor<double> t = randn(s, rng);
  for (auto& v : t.values())
    if (std::abs(v) < margin) v = v < 0 ? -margin - std::abs(v) : margin + v;
  return t;
}

void randomize(ParameterStore<double>& store, Rng& rng, double scale) {
  for (Parameter<double>* p : store.trainable())
    for (auto& v : p->value.values()) v += rng.normal() * scale;
}

Var<double> project_all(std::span<const Var<double>> outs, std::uint64_t seed) {
  Rng rng(seed);
  Var<double> total;
  for (const auto& o : outs) {
    Var<double> term = weighted_sum(o, randn(o.shape(), rng));
    total = total.valid() ? add(total, term) : term;
  }
  return total;
}

std::vector<GroundTruth> random_objects(Rng& rng, int image_size, int num_classes) {
  std::vector<GroundTruth> gts;
  const auto count = rng.integer(1, 3);
  for (std::int64_t k = 0; k < count; ++k) {
    const double w = rng.uniform(4, 10);
    const double h = rng.uniform(4, 10);
    const double x = rng.uniform(0, image_size - w);
    const double y = rng.uniform(0, image_size - h);
    gts.push_back({Box{static_cast<float>(x), static_cast<float>(y), static_cast<float>(x + w),
                       static_cast<float>(y + h)},
                   static_cast<int>(rng.integer(0, num_classes - 1))});
  }
  return gts;
}

}  // namespace

template <typename T>
GradCheckResult finite_diff_check(const LossBuilder<T>& loss, std::span<Tensor<T>> inputs,
                                  std::span<Parameter<T>* const> params,
                                  const GradCheckOptions& options) {
  std::vector<Var<T>> leaves;
  auto evaluate = [&](bool with_backward, std::uint64_t* kink) {
    Tape<T> tape;
    tape.set_track_kinks(true);
    leaves.clear();
    for (auto& x : inputs) leaves.push_back(tape.leaf(x));
    Var<T> l = loss(tape, leaves);
    if (l.shape().numel() != 1) throw std::invalid_argument("finite_diff_check: loss is not scalar");
    const double value = l.value()[0];
    if (kink != nullptr) *kink = tape.kink_signature();
    if (with_backward) {
      for (Parameter<T>* p : params) p->zero_grad();
      tape.backward(l);
      std::vector<Tensor<T>> grads;
      for (const auto& leaf : leaves) {
        const Tensor<T>* g = tape.grad(leaf);
        grads.push_back(g != nullptr ? *g : Tensor<T>(leaf.shape()));
      }
      return std::pair{value, grads};
    }
    return std::pair{value, std::vector<Tensor<T>>{}};
  };

  std::uint64_t base_kink = 0;
  auto [base_value, input_grads] = evaluate(true, &base_kink);
  std::vector<Probe<T>> probes;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    probes.push_back({"input" + std::to_string(i), &inputs[i], input_grads[i]});
  for (Parameter<T>* p : params) {
    if (!(p->grad.shape() == p->value.shape())) p->zero_grad();
    probes.push_back({p->name, &p->value, p->grad});
  }

  GradCheckResult result;
  if (!std::isfinite(base_value)) {
    result.finite = false;
    result.worst = "loss is not finite at the base point";
    return result;
  }
  for (std::size_t pi = 0; pi < probes.size(); ++pi) {
    Probe<T>& probe = probes[pi];
    const auto coords = pick_coords(probe.analytic, options.max_coords,
                                    mix_seed(options.seed ^ mix_seed(pi + 1)));
    double diff_max = 0, a_max = 0, n_max = 0;
    std::int64_t diff_at = -1;
    for (std::int64_t k : coords) {
      T& x = (*probe.value)[k];
      const T x0 = x;
      double h = options.step;
      std::optional<double> numeric;
      for (int attempt = 0; attempt <= options.max_shrink && !numeric; ++attempt, h /= 10) {
        double f[4];
        bool consistent = true;
        const double offsets[4] = {-2, -1, 1, 2};
        for (int s = 0; s < 4; ++s) {
          x = static_cast<T>(x0 + offsets[s] * h);
          std::uint64_t kink = 0;
          f[s] = evaluate(false, &kink).first;
          consistent = consistent && kink == base_kink;
        }
        x = x0;
        if (consistent) numeric = (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h);
      }
      if (!numeric) {
        ++result.skipped;
        continue;
      }
      ++result.checked;
      const double a = probe.analytic[k];
      const double n = *numeric;
      if (!std::isfinite(a) || !std::isfinite(n)) {
        result.finite = false;
        result.worst = probe.name + "[" + std::to_string(k) + "] is not finite";
        continue;
      }
      const double d = std::abs(a - n);
      result.max_elementwise_error =
          std::max(result.max_elementwise_error, d / std::max({std::abs(a), std::abs(n), 1e-8}));
      if (d > diff_max) {
        diff_max = d;
        diff_at = k;
      }
      a_max = std::max(a_max, std::abs(a));
      n_max = std::max(n_max, std::abs(n));
    }
    const double rel = diff_max / std::max({a_max, n_max, 1e-8});
    if (rel > result.max_rel_error || (result.worst.empty() && diff_at >= 0)) {
      if (rel >= result.max_rel_error) {
        result.max_rel_error = rel;
        if (result.finite) result.worst = probe.name + "[" + std::to_string(diff_at) + "]";
      }
    }
  }
  return result;
}

template <typename T>
LossBuilder<T> projected(TensorOp<T> op, std::uint64_t seed) {
  return [op = std::move(op), seed](Tape<T>& tape, std::span<const Var<T>> in) {
    Var<T> out = op(tape, in);
    Rng rng(seed);
    Tensor<T> w(out.shape());
    for (auto& v : w.values()) v = static_cast<T>(rng.normal());
    return weighted_sum(out, w);
  };
}

template GradCheckResult finite_diff_check(const LossBuilder<float>&, std::span<Tensor<float>>,
                                           std::span<Parameter<float>* const>,
                                           const GradCheckOptions&);
template GradCheckResult finite_diff_check(const LossBuilder<double>&, std::span<Tensor<double>>,
                                           std::span<Parameter<double>* const>,
                                           const GradCheckOptions&);
template LossBuilder<float> projected(TensorOp<float>, std::uint64_t);
template LossBuilder<double> projected(TensorOp<double>, std::uint64_t);

bool GradCheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed(); });
}

std::string GradCheckReport::format() const {
  std::string out = "check                                   max rel err  threshold  probes  result\n";
  for (const auto& e : entries) {
    char line[256];
    std::snprintf(line, sizeof line, "%-40s %11.3e  %9.0e  %6lld  %s%s\n", e.name.c_str(),
                  e.result.max_rel_error, e.threshold, static_cast<long long>(e.result.checked),
                  e.passed() ? "ok" : "FAIL", e.passed() ? "" : ("  at " + e.result.worst).c_str());
    out += line;
  }
  return out;
}

GradCheckReport grad_check_suite(const ModelConfig& config, std::uint64_t seed) {
  using D = double;
  const auto start = std::chrono::steady_clock::now();
  GradCheckReport report;
  Rng rng(seed);
  GradCheckOptions opt;
  opt.seed = seed;
  constexpr double kActivation = 1e-6;
  constexpr double kDefault = 1e-5;

  auto run = [&](std::string name, double threshold, const LossBuilder<D>& loss,
                 std::vector<Tensor<D>> inputs, std::vector<Parameter<D>*> params = {},
                 GradCheckOptions o = {}) {
    o.seed = seed;
    report.entries.push_back(
        {std::move(name), finite_diff_check<D>(loss, inputs, params, o), threshold});
  };
  auto op = [&](TensorOp<D> f) { return projected<D>(std::move(f), mix_seed(seed + 17)); };

  run("relu", kActivation, op([](Tape<D>&, auto in) { return relu(in[0]); }),
      {randn_away_from_zero({2, 3, 4, 4}, rng)});
  run("sigmoid", kActivation, op([](Tape<D>&, auto in) { return sigmoid(in[0]); }),
      {randn({2, 3, 4, 4}, rng, 2.0)});
  run("add", kDefault, op([](Tape<D>&, auto in) { return add(in[0], in[1]); }),
      {randn({2, 3, 4, 4}, rng), randn({2, 3, 4, 4}, rng)});
  run("mul_channel", kDefault, op([](Tape<D>&, auto in) { return mul_channel(in[0], in[1]); }),
      {randn({2, 3, 1, 1}, rng), randn({2, 3, 5, 4}, rng)});
  run("global_avg_pool", kDefault, op([](Tape<D>&, auto in) { return global_avg_pool(in[0]); }),
      {randn({2, 3, 5, 3}, rng)});
  run("concat_channels", kDefault,
      op([](Tape<D>&, auto in) { return concat_channels(in[0], in[1]); }),
      {randn({2, 2, 3, 3}, rng), randn({2, 3, 3, 3}, rng)});
  run("split_channels", kDefault,
      op([](Tape<D>&, auto in) {
        auto [a, b] = split_channels(in[0], 2);
        return add(scale(a, 2.0), split_channels(b, 2).first);
      }),
      {randn({2, 5, 3, 3}, rng)});
  run("upsample_nearest2x", kDefault,
      op([](Tape<D>&, auto in) { return upsample_nearest2x(in[0]); }), {randn({1, 2, 3, 4}, rng)});
  run("softmax_channels", kDefault, op([](Tape<D>&, auto in) { return softmax_channels(in[0]); }),
      {randn({2, 5, 3, 3}, rng)});
  run("pixel_shuffle", kDefault, op([](Tape<D>&, auto in) { return pixel_shuffle(in[0], 2); }),
      {randn({1, 8, 3, 2}, rng)});
  run("conv2d 3x3 stride 2", kDefault,
      op([](Tape<D>&, auto in) { return conv2d(in[0], in[1], std::optional{in[2]}, 2, 1); }),
      {randn({2, 3, 7, 6}, rng), randn({4, 3, 3, 3}, rng), randn({1, 4, 1, 1}, rng)});
  run("conv2d 1x1", kDefault,
      op([](Tape<D>&, auto in) { return conv2d(in[0], in[1], std::optional<Var<D>>{}, 1, 0); }),
      {randn({2, 3, 4, 5}, rng), randn({2, 3, 1, 1}, rng)});

  Tensor<D> mean(Shape{1, 3, 1, 1});
  Tensor<D> var(Shape{1, 3, 1, 1}, 1.0);
  run("batch_norm train", kDefault,
      op([&](Tape<D>&, auto in) {
        return batch_norm(in[0], in[1], in[2], NormMode::train, RunningStats<D>{&mean, &var, 0.1});
      }),
      {randn({2, 3, 4, 4}, rng), randn({1, 3, 1, 1}, rng), randn({1, 3, 1, 1}, rng)});
  Tensor<D> fixed_mean = randn({1, 3, 1, 1}, rng);
  Tensor<D> fixed_var(Shape{1, 3, 1, 1}, 1.7);
  run("batch_norm eval", kDefault,
      op([&](Tape<D>&, auto in) {
        return batch_norm(in[0], in[1], in[2], NormMode::eval,
                          RunningStats<D>{&fixed_mean, &fixed_var, 0.1});
      }),
      {randn({2, 3, 4, 4}, rng), randn({1, 3, 1, 1}, rng), randn({1, 3, 1, 1}, rng)});

  auto spectrum_op = [](Tape<D>&, auto in) {
    ComplexSpectrum<D> s = rfft2(in[0]);
    return concat_channels(s.real, s.imag);
  };
  run("rfft2 8x8", kDefault, op(spectrum_op), {randn({2, 2, 8, 8}, rng)});
  run("rfft2 6x7", kDefault, op(spectrum_op), {randn({1, 2, 6, 7}, rng)});
  run("irfft2 8x8", kDefault,
      op([](Tape<D>&, auto in) { return irfft2(ComplexSpectrum<D>{in[0], in[1], 8}); }),
      {randn({2, 2, 8, 5}, rng), randn({2, 2, 8, 5}, rng)});
  run("irfft2 6x7", kDefault,
      op([](Tape<D>&, auto in) { return irfft2(ComplexSpectrum<D>{in[0], in[1], 7}); }),
      {randn({1, 2, 6, 4}, rng), randn({1, 2, 6, 4}, rng)});
  run("complex_multiply", kDefault,
      op([](Tape<D>&, auto in) {
        ComplexSpectrum<D> p =
            complex_multiply(ComplexSpectrum<D>{in[0], in[1], 6}, ComplexSpectrum<D>{in[2], in[3], 6});
        return concat_channels(p.real, p.imag);
      }),
      {randn({1, 2, 4, 4}, rng), randn({1, 2, 4, 4}, rng), randn({1, 2, 4, 4}, rng),
       randn({1, 2, 4, 4}, rng)});

  {
    ParameterStore<D> store;
    auto fu = FourierUnitParams<D>::create(store, "fu", 3);
    randomize(store, rng, 0.3);
    run("spectral_conv", kDefault,
        op([&](Tape<D>&, auto in) {
          ComplexSpectrum<D> s = spectral_conv(rfft2(in[0]), fu);
          return concat_channels(s.real, s.imag);
        }),
        {randn({2, 3, 8, 8}, rng)}, store.trainable());
    run("fourier_unit 8x8", kActivation,
        op([&](Tape<D>&, auto in) { return fourier_unit(in[0], fu); }), {randn({2, 3, 8, 8}, rng)},
        store.trainable());
    run("fourier_unit 6x10", kActivation,
        op([&](Tape<D>&, auto in) { return fourier_unit(in[0], fu); }),
        {randn({2, 3, 6, 10}, rng)}, store.trainable());
  }
  {
    ParameterStore<D> store;
    ParameterStore<D> store_id;
    auto rb = ResidualBlock<D>::create(store, "block", 3, 4, 2, rng);
    auto rb_id = ResidualBlock<D>::create(store_id, "identity", 3, 3, 1, rng);
    randomize(store, rng, 0.1);
    randomize(store_id, rng, 0.1);
    run("residual_block projection", kActivation,
        op([&](Tape<D>&, auto in) { return residual_block(in[0], rb, NormMode::train); }),
        {randn({2, 3, 8, 8}, rng)}, store.trainable());
    run("residual_block identity", kActivation,
        op([&](Tape<D>&, auto in) { return residual_block(in[0], rb_id, NormMode::train); }),
        {randn({2, 3, 6, 6}, rng)}, store_id.trainable());
  }
  {
    // Each op gets its own store so unused parameters do not enter its check.
    ParameterStore<D> s_carafe, s_cam, s_td, s_bu;
    auto carafe = CarafeParams<D>::create(s_carafe, "carafe", 3, 3, 3, 2, rng);
    auto cam_params = CamParams<D>::create(s_cam, "cam", 3, rng);
    auto td = Conv2d<D>::create(s_td, "td", 3, 3, 1, 1, true, rng);
    auto down = Conv2d<D>::create(s_bu, "down", 3, 3, 3, 2, false, rng);
    auto bu = Conv2d<D>::create(s_bu, "bu", 3, 3, 1, 1, true, rng);
    for (auto* st : {&s_carafe, &s_cam, &s_td, &s_bu}) randomize(*st, rng, 0.3);
    auto joined = [](std::initializer_list<ParameterStore<D>*> stores) {
      std::vector<Parameter<D>*> out;
      for (auto* st : stores)
        for (auto* p : st->trainable()) out.push_back(p);
      return out;
    };
    run("carafe_reassemble", kDefault,
        op([](Tape<D>&, auto in) { return carafe_reassemble(in[0], in[1], 3); }),
        {randn({1, 2, 4, 3}, rng), randn({1, 9, 8, 6}, rng)});
    run("carafe_upsample", kDefault,
        op([&](Tape<D>&, auto in) { return carafe_upsample(in[0], carafe); }),
        {randn({2, 3, 3, 4}, rng)}, s_carafe.trainable());
    run("cam", kDefault, op([&](Tape<D>&, auto in) { return cam(in[0], cam_params, NormMode::train); }),
        {randn({2, 3, 5, 5}, rng)}, s_cam.trainable());
    run("top_down_step", kDefault,
        op([&](Tape<D>&, auto in) {
          return top_down_step(in[0], std::optional<Var<D>>{in[1]}, td, &carafe);
        }),
        {randn({1, 3, 4, 4}, rng), randn({1, 3, 2, 2}, rng)}, joined({&s_td, &s_carafe}));
    run("bottom_up_step", kDefault,
        op([&](Tape<D>&, auto in) { return bottom_up_step(in[0], in[1], down, bu); }),
        {randn({1, 3, 4, 4}, rng), randn({1, 3, 8, 8}, rng)}, s_bu.trainable());
  }

  // 64x64 keeps the coarsest level at 2x2; on 1x1 maps BN over the batch is nearly degenerate
  // and gradients vanish below finite-difference noise.
  const std::int64_t size = 64;
  const std::int64_t batch = 2;
  Tensor<D> image = randn({batch, config.in_channels, size, size}, rng);
  {
    ParameterStore<D> store;
    Rng init(seed + 1);
    const std::array<std::int64_t, 4> widths{config.stages[0].channels, config.stages[1].channels,
                                             config.stages[2].channels, config.stages[3].channels};
    auto neck = BsFpnParams<D>::create(store, config, widths, init);
    randomize(store, rng, 0.1);
    std::vector<Tensor<D>> levels;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::int64_t s = size / kLevelStrides[i];
      levels.push_back(randn({batch, widths[i], s, s}, rng));
    }
    run("bs_fpn", kDefault,
        [&](Tape<D>&, std::span<const Var<D>> in) {
          PyramidFeatures<D> g{{in[0], in[1], in[2], in[3]}};
          auto out = bs_fpn_forward(g, neck, NormMode::train);
          return project_all(out.levels, seed + 3);
        },
        levels, store.trainable(), GradCheckOptions{opt.step, 8, opt.max_shrink, seed});
  }
  for (bool fu : {false, true}) {
    ModelConfig c = config;
    c.set_fu(fu);
    ParameterStore<D> store;
    Rng init(seed + 2);
    FResNet<D> backbone(store, c, init);
    randomize(store, rng, 0.1);
    run(fu ? "backbone with Fourier Units" : "backbone without Fourier Units", kDefault,
        [&](Tape<D>&, std::span<const Var<D>> in) {
          auto out = f_resnet_forward(in[0], backbone, NormMode::train);
          return project_all(out.levels, seed + 4);
        },
        {image}, store.trainable(), GradCheckOptions{opt.step, 6, opt.max_shrink, seed});
  }

  std::vector<std::vector<AnchorTarget>> targets;
  for (bool full : {false, true}) {
    ModelConfig c = config;
    c.set_fu(full);
    c.bs_fpn = full;
    FFPFModel<D> model(c, seed + 5);
    randomize(model.store(), rng, 0.2);
    const auto& anchors = model.anchors(size, size);
    targets.clear();
    Rng boxes(seed + 6);
    for (std::int64_t n = 0; n < batch; ++n) {
      const auto gts = random_objects(boxes, static_cast<int>(size), c.num_classes);
      targets.push_back(assign_targets(anchors, gts));
    }
    run(full ? "detection loss, F-ResNet + BS-FPN" : "detection loss, plain backbone + FPN",
        kDefault,
        [&](Tape<D>& tape, std::span<const Var<D>>) {
          HeadOutputs<D> out = model.forward(tape.constant(image), NormMode::train);
          return detection_loss(out, std::span<const std::vector<AnchorTarget>>(targets),
                                c.num_classes, c.anchors_per_location);
        },
        {}, model.store().trainable(), GradCheckOptions{opt.step, 4, opt.max_shrink, seed});
  }
  {
    // Head outputs perturbed directly, covering the focal and smooth-L1 terms in isolation. A
    // 128x128 anchor grid with one object per anchor scale puts positives on every level.
    const ModelConfig& c = config;
    const std::int64_t extent = 128;
    const auto anchors = generate_anchors(extent, extent, c);
    targets.clear();
    for (std::int64_t n = 0; n < batch; ++n) {
      std::vector<GroundTruth> gts;
      for (std::size_t li = 0; li < 4; ++li) {
        const double side = c.anchor_base_scale * kLevelStrides[li] * rng.uniform(0.8, 1.1);
        const double x = rng.uniform(0, static_cast<double>(extent) - side);
        const double y = rng.uniform(0, static_cast<double>(extent) - side);
        gts.push_back({Box{static_cast<float>(x), static_cast<float>(y),
                           static_cast<float>(x + side), static_cast<float>(y + side * 0.9)},
                       static_cast<int>(li) % c.num_classes});
      }
      targets.push_back(assign_targets(anchors, gts));
    }
    std::vector<Tensor<D>> raw;
    for (int kind = 0; kind < 2; ++kind)
      for (std::size_t li = 0; li < 4; ++li) {
        const std::int64_t s = extent / kLevelStrides[li];
        const std::int64_t ch = c.anchors_per_location * (kind == 0 ? c.num_classes : 4);
        raw.push_back(randn({batch, ch, s, s}, rng, kind == 0 ? 2.0 : 0.3));
      }
    run("focal + smooth-L1 loss", kDefault,
        [&](Tape<D>&, std::span<const Var<D>> in) {
          HeadOutputs<D> out{{in[0], in[1], in[2], in[3]}, {in[4], in[5], in[6], in[7]}};
          return detection_loss(out, std::span<const std::vector<AnchorTarget>>(targets),
                                c.num_classes, c.anchors_per_location);
        },
        raw, {}, GradCheckOptions{opt.step, 48, opt.max_shrink, seed});
  }

  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace ffpf
