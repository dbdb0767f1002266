#include <doctest.h>

#include "ffpf/grad_check.hpp"
#include "ffpf/nn.hpp"
#include "oracles.hpp"

using namespace ffpf;

namespace {

template <typename T>
const Tensor<T>& grad_of(Tape<T>& tape, const Var<T>& v) {
  const Tensor<T>* g = tape.grad(v);
  REQUIRE(g != nullptr);
  return *g;
}

}  // namespace

TEST_CASE("tensor storage matches its shape") {
  Tensor<float> t(Shape{2, 3, 4, 5});
  CHECK(t.numel() == 120);
  CHECK(t.offset(1, 2, 3, 4) == 119);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, -1, 2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>(3)), std::invalid_argument);
}

TEST_CASE("conv2d with an identity 1x1 kernel returns its input") {
  Tape<float> tape;
  const auto x = oracle::random_tensor<float>({2, 3, 5, 4}, 1);
  Tensor<float> w(Shape{3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.at(c, c, 0, 0) = 1.0f;
  Var<float> y = conv2d(tape.constant(x), tape.constant(w), std::optional<Var<float>>{}, 1, 0);
  CHECK(y.value() == x);
}

TEST_CASE("conv2d of ones with a 3x3 ones kernel counts the window") {
  Tape<float> tape;
  Var<float> y = conv2d(tape.constant(Tensor<float>({1, 1, 5, 6}, 1.0f)),
                        tape.constant(Tensor<float>({1, 1, 3, 3}, 1.0f)),
                        std::optional<Var<float>>{}, 1, 1);
  CHECK(y.value().at(0, 0, 2, 2) == 9.0f);
  CHECK(y.value().at(0, 0, 0, 0) == 4.0f);
  CHECK(y.value().at(0, 0, 4, 5) == 4.0f);
  CHECK(y.value().at(0, 0, 0, 3) == 6.0f);
}

TEST_CASE("conv2d matches the direct loop oracle in float") {
  const auto x = oracle::random_tensor<double>({2, 3, 8, 8}, 2);
  const auto w = oracle::random_tensor<double>({4, 3, 3, 3}, 3);
  const auto b = oracle::random_tensor<double>({1, 4, 1, 1}, 4);
  Tape<float> tape;
  Var<float> y = conv2d(tape.constant(x.cast<float>()), tape.constant(w.cast<float>()),
                        std::optional{tape.constant(b.cast<float>())}, 1, 1);
  const auto ref = oracle::conv2d(x, w, &b, 1, 1);
  CHECK(max_abs_diff(y.value().cast<double>(), ref) < 1e-5);
}

TEST_CASE("conv2d matches the oracle over a grid of small shapes") {
  std::uint64_t seed = 10;
  for (int k : {1, 3})
    for (int stride : {1, 2})
      for (std::int64_t h = 4; h <= 9; ++h)
        for (std::int64_t w = 4; w <= 9; ++w) {
          const int pad = k / 2;
          const auto x = oracle::random_tensor<double>({2, 2, h, w}, ++seed);
          const auto wt = oracle::random_tensor<double>({3, 2, k, k}, ++seed);
          Tape<double> tape;
          Var<double> y = conv2d(tape.constant(x), tape.constant(wt), std::optional<Var<double>>{},
                                 stride, pad);
          const auto ref = oracle::conv2d(x, wt, nullptr, stride, pad);
          REQUIRE(y.shape() == ref.shape());
          CHECK(max_abs_diff(y.value(), ref) < 1e-12);
        }
}

TEST_CASE("conv2d reports the mismatched axis") {
  Tape<float> tape;
  try {
    conv2d(tape.constant(Tensor<float>({1, 3, 4, 4})), tape.constant(Tensor<float>({2, 4, 3, 3})),
           std::optional<Var<float>>{}, 1, 1);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    CHECK(e.axis() == "Cin");
  }
  CHECK_THROWS_AS(conv2d(tape.constant(Tensor<float>({1, 3, 4, 4})),
                         tape.constant(Tensor<float>({2, 3, 2, 2})), std::optional<Var<float>>{}, 1, 0),
                  DimensionError);
}

TEST_CASE("batch_norm on constant input") {
  Tape<float> tape;
  Var<float> x = tape.constant(Tensor<float>({2, 3, 4, 4}, 5.0f));
  Var<float> gamma = tape.constant(Tensor<float>({1, 3, 1, 1}, 1.0f));
  Var<float> y = batch_norm(x, gamma, tape.constant(Tensor<float>({1, 3, 1, 1})), NormMode::train, {});
  for (float v : y.value().values()) CHECK(v == 0.0f);
  Var<float> z = batch_norm(x, gamma, tape.constant(Tensor<float>({1, 3, 1, 1}, 0.7f)),
                            NormMode::train, {});
  for (float v : z.value().values()) CHECK(v == 0.7f);
}

TEST_CASE("batch_norm output statistics in train mode") {
  Tape<double> tape;
  const auto x = oracle::random_tensor<double>({4, 3, 5, 5}, 7, 3.0);
  Var<double> y = batch_norm(tape.constant(x), tape.constant(Tensor<double>({1, 3, 1, 1}, 1.0)),
                             tape.constant(Tensor<double>({1, 3, 1, 1})), NormMode::train, {});
  const Shape s = y.shape();
  for (std::int64_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t i = 0; i < s.plane(); ++i) {
        mean += y.value().plane(n, c)[i];
        sq += y.value().plane(n, c)[i] * y.value().plane(n, c)[i];
      }
    const double count = static_cast<double>(s.n * s.plane());
    mean /= count;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(sq / count - mean * mean - 1.0) < 1e-4);
  }
}

TEST_CASE("batch_norm running statistics") {
  Tensor<double> mean(Shape{1, 1, 1, 1});
  Tensor<double> var(Shape{1, 1, 1, 1}, 1.0);
  Tape<double> tape;
  Tensor<double> x(Shape{1, 1, 1, 4}, std::vector<double>{1, 2, 3, 4});
  Var<double> one = tape.constant(Tensor<double>({1, 1, 1, 1}, 1.0));
  Var<double> zero = tape.constant(Tensor<double>({1, 1, 1, 1}));
  batch_norm(tape.constant(x), one, zero, NormMode::train, RunningStats<double>{&mean, &var, 0.1});
  CHECK(mean[0] == doctest::Approx(0.25));
  // Unbiased batch variance 5/3 blended into the running estimate.
  CHECK(var[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));

  Var<double> y = batch_norm(tape.constant(x), one, zero, NormMode::eval,
                             RunningStats<double>{&mean, &var, 0.1});
  CHECK(y.value()[0] == doctest::Approx((1.0 - 0.25) / std::sqrt(var[0] + kBatchNormEps)));
  CHECK(mean[0] == doctest::Approx(0.25));

  CHECK_THROWS_AS(batch_norm(tape.constant(Tensor<double>({1, 2, 2, 2})), one, zero,
                             NormMode::train, {}),
                  DimensionError);
}

TEST_CASE("pointwise activations and arithmetic") {
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>({1, 1, 1, 3}, std::vector<double>{-2, 0, 3}));
  Var<double> r = relu(x);
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[2] == 3.0);
  Var<double> s = sigmoid(x);
  CHECK(s.value()[1] == 0.5);
  tape.backward(sum(s));
  CHECK(grad_of(tape, x)[1] == doctest::Approx(0.25));

  Tape<float> t2;
  auto g = t2.constant(Tensor<float>({2, 3, 1, 1}, 0.5f));
  auto gx = oracle::random_tensor<float>({2, 3, 4, 4}, 9);
  Var<float> m = mul_channel(g, t2.constant(gx));
  for (std::int64_t i = 0; i < gx.numel(); ++i) CHECK(m.value()[i] == gx[i] / 2);

  CHECK_THROWS_AS(add(t2.constant(Tensor<float>({1, 2, 3, 3})), t2.constant(Tensor<float>({1, 2, 3, 1}))),
                  DimensionError);
  CHECK_THROWS_AS(mul_channel(t2.constant(Tensor<float>({1, 2, 3, 1})), t2.constant(gx)),
                  DimensionError);
  CHECK_THROWS_AS(mul_channel(t2.constant(Tensor<float>({2, 3, 1, 1})), t2.constant(Tensor<float>({1, 3, 4, 4}))),
                  DimensionError);
}

TEST_CASE("global average pooling") {
  Tape<double> tape;
  CHECK(global_avg_pool(tape.constant(Tensor<double>({1, 1, 3, 3}, 4.5))).value()[0] == 4.5);
  Var<double> p = global_avg_pool(tape.constant(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4})));
  CHECK(p.value()[0] == 2.5);

  const auto x = oracle::random_tensor<double>({2, 3, 5, 7}, 11);
  Var<double> leaf = tape.leaf(x);
  Var<double> q = global_avg_pool(leaf);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 3; ++c) {
      double acc = 0;
      for (std::int64_t i = 0; i < 35; ++i) acc += x.plane(n, c)[i];
      CHECK(std::abs(q.value().at(n, c, 0, 0) - acc / 35.0) < 1e-6);
    }
  tape.backward(sum(q));
  for (double g : grad_of(tape, leaf).values()) CHECK(g == doctest::Approx(1.0 / 35.0));
  CHECK_THROWS(global_avg_pool(tape.constant(Tensor<double>({1, 1, 0, 3}))));
}

TEST_CASE("concat and split round trip") {
  Tape<float> tape;
  const auto a = oracle::random_tensor<float>({1, 2, 3, 3}, 12);
  const auto b = oracle::random_tensor<float>({1, 3, 3, 3}, 13);
  Var<float> cat = concat_channels(tape.constant(a), tape.constant(b));
  CHECK(cat.shape().c == 5);
  auto [x, y] = split_channels(cat, 2);
  CHECK(x.value() == a);
  CHECK(y.value() == b);
  CHECK_THROWS_AS(concat_channels(tape.constant(a), tape.constant(Tensor<float>({1, 3, 3, 2}))),
                  DimensionError);
  CHECK_THROWS(split_channels(cat, 0));
  CHECK_THROWS(split_channels(cat, 5));
}

TEST_CASE("concat routes gradients to the right operand") {
  std::vector<Tensor<double>> in{oracle::random_tensor<double>({1, 2, 3, 3}, 14),
                                 oracle::random_tensor<double>({1, 3, 3, 3}, 15)};
  auto loss = projected<double>(
      [](Tape<double>&, auto v) { return concat_channels(v[0], v[1]); }, 3);
  CHECK(finite_diff_check<double>(loss, in).max_rel_error < 1e-6);

  Tape<double> tape;
  Var<double> a = tape.leaf(in[0]);
  Var<double> b = tape.leaf(in[1]);
  tape.backward(sum(split_channels(concat_channels(a, b), 2).second));
  for (double g : grad_of(tape, a).values()) CHECK(g == 0.0);
  for (double g : grad_of(tape, b).values()) CHECK(g == 1.0);
}

TEST_CASE("backward seeds and zero-fills gradients") {
  Tape<double> tape;
  Var<double> x = tape.leaf(oracle::random_tensor<double>({1, 2, 2, 2}, 16));
  tape.backward(sum(x));
  for (double g : grad_of(tape, x).values()) CHECK(g == 1.0);

  Tape<double> t2;
  Var<double> z = t2.leaf(Tensor<double>({1, 1, 1, 1}, -1.0));
  t2.backward(sum(relu(z)));
  CHECK(grad_of(t2, z)[0] == 0.0);

  Tape<double> t3;
  CHECK_THROWS_AS(t3.backward(t3.leaf(Tensor<double>({1, 1, 2, 1}))), std::invalid_argument);

  ParameterStore<double> store;
  Parameter<double>& used = store.add("used", Tensor<double>({1, 1, 1, 1}, 2.0));
  Parameter<double>& unused = store.add("unused", Tensor<double>({1, 1, 1, 1}, 3.0));
  Tape<double> t4;
  Var<double> u = t4.parameter(used);
  t4.parameter(unused);
  t4.backward(sum(scale(u, 4.0)));
  CHECK(used.grad[0] == 4.0);
  REQUIRE(unused.grad.numel() == 1);
  CHECK(unused.grad[0] == 0.0);
}

TEST_CASE("finite differences agree on scalar activations") {
  std::vector<Tensor<double>> away{Tensor<double>({1, 1, 1, 4}, std::vector<double>{-1.5, -0.3, 0.4, 2.0})};
  auto relu_loss = projected<double>([](Tape<double>&, auto v) { return relu(v[0]); }, 1);
  CHECK(finite_diff_check<double>(relu_loss, away).max_rel_error < 1e-6);

  std::vector<Tensor<double>> zero{Tensor<double>({1, 1, 1, 1})};
  LossBuilder<double> sig = [](Tape<double>&, std::span<const Var<double>> v) { return sum(sigmoid(v[0])); };
  Tape<double> tape;
  const double h = 1e-4;
  const double numeric = (1 / (1 + std::exp(-h)) - 1 / (1 + std::exp(h))) / (2 * h);
  CHECK(numeric == doctest::Approx(0.25).epsilon(1e-8));
  CHECK(finite_diff_check<double>(sig, zero).max_rel_error < 1e-6);
}

TEST_CASE("conv2d gradients in 32-bit and 64-bit checks") {
  auto make = [](auto tag) {
    using T = decltype(tag);
    return projected<T>(
        [](Tape<T>&, auto v) { return conv2d(v[0], v[1], std::optional{v[2]}, 1, 1); }, 4);
  };
  std::vector<Tensor<double>> in64{oracle::random_tensor<double>({1, 2, 5, 5}, 20),
                                   oracle::random_tensor<double>({3, 2, 3, 3}, 21),
                                   oracle::random_tensor<double>({1, 3, 1, 1}, 22)};
  CHECK(finite_diff_check<double>(make(0.0), in64).max_rel_error < 1e-6);

  std::vector<Tensor<float>> in32;
  for (const auto& t : in64) in32.push_back(t.cast<float>());
  GradCheckOptions opt;
  opt.step = 1e-2;
  CHECK(finite_diff_check<float>(make(0.0f), in32, {}, opt).max_rel_error < 1e-3);
}

TEST_CASE("differentiable ops pass at ten seeded points") {
  struct Case {
    const char* name;
    TensorOp<double> op;
    std::vector<Shape> shapes;
  };
  const std::vector<Case> cases{
      {"sigmoid", [](Tape<double>&, auto v) { return sigmoid(v[0]); }, {{1, 2, 3, 3}}},
      {"add", [](Tape<double>&, auto v) { return add(v[0], v[1]); }, {{1, 2, 3, 3}, {1, 2, 3, 3}}},
      {"mul_channel", [](Tape<double>&, auto v) { return mul_channel(v[0], v[1]); }, {{2, 2, 1, 1}, {2, 2, 3, 3}}},
      {"global_avg_pool", [](Tape<double>&, auto v) { return global_avg_pool(v[0]); }, {{2, 2, 3, 4}}},
      {"softmax_channels", [](Tape<double>&, auto v) { return softmax_channels(v[0]); }, {{1, 4, 2, 3}}},
      {"batch_norm", [](Tape<double>&, auto v) { return batch_norm(v[0], v[1], v[2], NormMode::train, {}); },
       {{2, 2, 3, 3}, {1, 2, 1, 1}, {1, 2, 1, 1}}},
      {"conv2d", [](Tape<double>&, auto v) { return conv2d(v[0], v[1], std::optional<Var<double>>{}, 2, 1); },
       {{1, 2, 5, 4}, {2, 2, 3, 3}}},
  };
  for (const auto& c : cases)
    for (std::uint64_t point = 0; point < 10; ++point) {
      std::vector<Tensor<double>> in;
      for (std::size_t i = 0; i < c.shapes.size(); ++i)
        in.push_back(oracle::random_tensor<double>(c.shapes[i], 100 * point + i));
      const auto r = finite_diff_check<double>(projected<double>(c.op, point), in);
      INFO(c.name << " at point " << point << ": " << r.worst);
      CHECK(r.passed(1e-6));
    }
}

TEST_CASE("forward ops are deterministic") {
  const auto x = oracle::random_tensor<float>({2, 3, 9, 7}, 30);
  const auto w = oracle::random_tensor<float>({5, 3, 3, 3}, 31);
  Tape<float> a;
  Tape<float> b;
  auto run = [&](Tape<float>& t) {
    return softmax_channels(conv2d(t.constant(x), t.constant(w), std::optional<Var<float>>{}, 2, 1)).value();
  };
  CHECK(run(a) == run(b));
}

TEST_CASE("parameter names are unique") {
  ParameterStore<float> store;
  store.add("w", Tensor<float>({1, 1, 1, 1}));
  CHECK_THROWS_AS(store.add("w", Tensor<float>({1, 1, 1, 1})), std::invalid_argument);
  CHECK(store.find("missing") == nullptr);
}
