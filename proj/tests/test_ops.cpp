// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "strattn/naive.hpp"
#include "strattn/ops.hpp"

using namespace strattn;
using testutil::random_tensor;

namespace {
const Conv2dSpec kPointwise{1, {1, 1}, {0, 0}};
}

TEST_CASE("conv2d 1x1 identity weight is the identity") {
  Rng rng(1);
  auto x = random_tensor({2, 4, 3, 5}, rng);
  Tensor<double> w({4, 4, 1, 1});
  for (std::size_t c = 0; c < 4; ++c) w(c, c, 0, 0) = 1.0;
  auto y = conv2d_grouped(x, w, nullptr, kPointwise);
  CHECK(testutil::bit_identical(x, y));
}

TEST_CASE("conv2d depthwise scalar weight scales channels") {
  Rng rng(2);
  auto x = random_tensor({1, 3, 4, 4}, rng);
  Tensor<double> w = Tensor<double>::full({3, 1, 1, 1}, 2.0);
  auto y = conv2d_grouped(x, w, nullptr, Conv2dSpec{3, {1, 1}, {0, 0}});
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == 2.0 * x[i]);
}

TEST_CASE("random grouped 3x3 conv matches the loop oracle") {
  Rng rng(3);
  auto x = random_tensor({2, 8, 5, 5}, rng);
  auto w = random_tensor({6, 4, 3, 3}, rng);  // groups=2: 8 in -> 6 out
  auto b = random_tensor({6}, rng);
  const Conv2dSpec spec{2, {1, 1}, {1, 1}};
  auto fast = conv2d_grouped(x, w, &b, spec);
  auto ref = naive::conv2d(x, w, &b, spec.groups, spec.stride, spec.padding);
  CHECK(max_rel_diff(fast, ref) < 1e-12);
}

TEST_CASE("dense conv equals the oracle across shapes up to 2x8x7x7") {
  Rng rng(4);
  for (std::size_t n : {1, 2})
    for (std::size_t c : {1, 3, 8})
      for (std::size_t hw : {1, 4, 7})
        for (std::size_t k : {1, 3})
          for (int stride : {1, 2})
            for (int pad : {0, 1}) {
              if (hw + 2 * std::size_t(pad) < k) continue;
              auto x = random_tensor({n, c, hw, hw}, rng);
              auto w = random_tensor({4, c, k, k}, rng);
              const Conv2dSpec spec{1, {stride, stride}, {pad, pad}};
              auto fast = conv2d_grouped(x, w, nullptr, spec);
              auto ref = naive::conv2d(x, w, nullptr, 1, spec.stride, spec.padding);
              CHECK(max_rel_diff(fast, ref) < 1e-10);
            }
}

TEST_CASE("conv2d structured shape errors") {
  Rng rng(5);
  auto x = random_tensor({1, 6, 4, 4}, rng);
  auto w = random_tensor({4, 2, 1, 1}, rng);
  // groups=4 does not divide 6 input channels
  CHECK_THROWS_WITH_AS(
      (void)conv2d_grouped(x, w, nullptr, Conv2dSpec{4, {1, 1}, {0, 0}}),
      doctest::Contains("not divisible by groups"), ShapeError);
  // weight in-extent inconsistent with channels/groups
  CHECK_THROWS_WITH_AS(
      (void)conv2d_grouped(x, w, nullptr, Conv2dSpec{2, {1, 1}, {0, 0}}),
      doctest::Contains("weight in-channel extent"), ShapeError);
  auto bad_bias = random_tensor({3}, rng);
  auto w2 = random_tensor({4, 6, 1, 1}, rng);
  CHECK_THROWS_WITH_AS((void)conv2d_grouped(x, w2, &bad_bias, kPointwise),
                       doctest::Contains("bias extent"), ShapeError);
}

TEST_CASE("conv2d backward matches finite differences") {
  Rng rng(6);
  auto x = random_tensor({2, 4, 5, 5}, rng);
  auto w = random_tensor({6, 2, 3, 3}, rng, -0.5, 0.5);
  auto b = random_tensor({6}, rng);
  const Conv2dSpec spec{2, {2, 2}, {1, 1}};

  auto loss = [&] {
    auto y = conv2d_grouped(x, w, &b, spec);
    double s = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * double(i % 7 + 1);
    return s;
  };
  auto y = conv2d_grouped(x, w, &b, spec);
  Tensor<double> gy(y.shape());
  for (std::size_t i = 0; i < gy.numel(); ++i) gy[i] = double(i % 7 + 1);
  auto grads = conv2d_grouped_backward(gy, x, w, true, spec);

  for (auto [value, analytic] : {std::pair{&x, &grads.input},
                                 std::pair{&w, &grads.weight},
                                 std::pair{&b, &grads.bias}}) {
    for (std::size_t i = 0; i < value->numel(); i += 3) {
      const double saved = (*value)[i];
      const double h = 1e-6 * std::max(std::abs(saved), 1.0);
      (*value)[i] = saved + h;
      const double up = loss();
      (*value)[i] = saved - h;
      const double down = loss();
      (*value)[i] = saved;
      CHECK((*analytic)[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-5));
    }
  }
}

TEST_CASE("softmax basics") {
  Tensor<double> zeros({4});
  auto u = softmax(zeros, 0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(u[i] == doctest::Approx(0.25).epsilon(1e-15));

  Tensor<double> two({2}, {0.0, std::log(2.0)});
  auto p = softmax(two, 0);
  CHECK(p[0] == doctest::Approx(1.0 / 3).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(2.0 / 3).epsilon(1e-14));
}

TEST_CASE("softmax is shift-stable for large logits") {
  Tensor<double> big({3}, {1000.0, 1001.0, 999.0});
  auto p = softmax(big, 0);
  CHECK(all_finite(p));
  // direct evaluation after manual shift
  const double z[3] = {std::exp(-1.0), std::exp(0.0), std::exp(-2.0)};
  const double denom = z[0] + z[1] + z[2];
  for (int i = 0; i < 3; ++i)
    CHECK(p[std::size_t(i)] == doctest::Approx(z[i] / denom).epsilon(1e-12));
}

TEST_CASE("masked softmax renormalizes over valid entries only") {
  Rng rng(7);
  auto logits = random_tensor({3, 5, 2}, rng, -4, 4);
  Tensor<double> mask(logits.shape());
  for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = rng.uniform() < 0.6 ? 1.0 : 0.0;
  // ensure at least one valid entry per (outer, inner) slice of axis 1
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t in = 0; in < 2; ++in) mask[o * 10 + 0 * 2 + in] = 1.0;

  auto p = softmax(logits, 1, &mask);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t in = 0; in < 2; ++in) {
      double sum = 0;
      for (std::size_t l = 0; l < 5; ++l) {
        const std::size_t idx = o * 10 + l * 2 + in;
        if (mask[idx] == 0.0) CHECK(p[idx] == 0.0);
        sum += p[idx];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }

  Tensor<double> none = Tensor<double>::zeros({2, 2});
  CHECK_THROWS_AS((void)softmax(logits, 3), ShapeError);  // axis out of range
  Tensor<double> l2({2, 2}, {1, 2, 3, 4});
  CHECK_THROWS_AS((void)softmax(l2, 1, &none), NumericError);  // fully masked slices
}

TEST_CASE("softmax sums to one for random inputs (property)") {
  Rng rng(8);
  for (int trial = 0; trial < 25; ++trial) {
    auto logits = random_tensor({2, 7, 3}, rng, -30, 30);
    auto p = softmax(logits, 1);
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t in = 0; in < 3; ++in) {
        double sum = 0;
        for (std::size_t l = 0; l < 7; ++l) sum += p[o * 21 + l * 3 + in];
        CHECK(std::abs(sum - 1.0) <= 1e-12);
      }
  }
}

TEST_CASE("softmax_backward matches finite differences") {
  Rng rng(9);
  auto logits = random_tensor({2, 5}, rng, -2, 2);
  auto upstream = random_tensor({2, 5}, rng);
  auto loss = [&] {
    auto p = softmax(logits, 1);
    double s = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) s += p[i] * upstream[i];
    return s;
  };
  auto p = softmax(logits, 1);
  auto grad = softmax_backward(p, upstream, 1);
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double saved = logits[i];
    const double h = 1e-6;
    logits[i] = saved + h;
    const double up = loss();
    logits[i] = saved - h;
    const double down = loss();
    logits[i] = saved;
    CHECK(grad[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
  }
}

TEST_CASE("sigmoid values and saturation") {
  Tensor<double> x({4}, {0.0, std::log(3.0), 50.0, -50.0});
  auto y = sigmoid(x);
  CHECK(y[0] == 0.5);
  CHECK(y[1] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(std::abs(y[2] - 1.0) < 1e-15);
  CHECK(std::abs(y[3] - 0.0) < 1e-15);
  CHECK(all_finite(y));
}

TEST_CASE("batch_norm training normalizes per channel") {
  Rng rng(10);
  auto x = random_tensor({4, 3, 5, 5}, rng, -3, 9);
  auto p = BatchNormParams<double>::identity(3);
  auto r = batch_norm(x, p);
  const std::size_t area = 25, count = 4 * area;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < area; ++i) {
        const double v = r.out[(n * 3 + c) * area + i];
        sum += v;
        sq += v * v;
      }
    const double mean = sum / count;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(sq / count - mean * mean == doctest::Approx(1.0).epsilon(1e-3));  // eps bias
    CHECK(p.running_mean[c] != 0.0);  // running stats moved
  }
}

TEST_CASE("batch_norm frozen is the expected affine map") {
  Rng rng(11);
  auto x = random_tensor({2, 2, 3, 3}, rng);
  auto p = BatchNormParams<double>::identity(2);
  p.mode = BatchNormParams<double>::Mode::frozen;
  // running_var chosen so sqrt(var + eps) == 1 and the map is exactly 2x + 3
  for (std::size_t c = 0; c < 2; ++c) {
    p.running_var[c] = 1.0 - double(p.eps);
    p.gamma[c] = 2.0;
    p.beta[c] = 3.0;
  }
  auto r = batch_norm(x, p);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(r.out[i] == 2.0 * x[i] + 3.0);
}

TEST_CASE("batch_norm frozen affinity property") {
  Rng rng(12);
  auto x = random_tensor({1, 2, 4, 4}, rng);
  auto y = random_tensor({1, 2, 4, 4}, rng);
  auto p = BatchNormParams<double>::identity(2);
  p.mode = BatchNormParams<double>::Mode::frozen;
  p.running_mean[0] = 0.3;
  p.running_var[1] = 2.5;
  p.gamma[0] = 1.7;
  p.beta[1] = -0.4;
  auto f = [&](const Tensor<double>& t) { return batch_norm(t, p).out; };
  // affine: f(x + y) + f(0) == f(x) + f(y)
  auto lhs = f(x + y) + f(Tensor<double>::zeros(x.shape()));
  auto rhs = f(x) + f(y);
  CHECK(max_rel_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("batch_norm degenerate training batch errors") {
  Tensor<double> x({1, 3, 1, 1}, {1, 2, 3});
  auto p = BatchNormParams<double>::identity(3);
  CHECK_THROWS_AS((void)batch_norm(x, p), NumericError);
  p.mode = BatchNormParams<double>::Mode::frozen;
  CHECK_NOTHROW((void)batch_norm(x, p));
}

TEST_CASE("batch_norm backward matches finite differences at 1e-6") {
  Rng rng(13);
  auto x = random_tensor({2, 3, 4, 4}, rng, -2, 2);
  auto upstream = random_tensor({2, 3, 4, 4}, rng);
  for (auto mode : {BatchNormParams<double>::Mode::training,
                    BatchNormParams<double>::Mode::frozen}) {
    auto p = BatchNormParams<double>::identity(3);
    p.mode = mode;
    p.track_running = false;
    for (std::size_t c = 0; c < 3; ++c) {
      p.gamma[c] = 0.5 + 0.3 * double(c);
      p.beta[c] = 0.1 * double(c);
      p.running_mean[c] = 0.05 * double(c);
      p.running_var[c] = 1.0 + 0.2 * double(c);
    }
    auto loss = [&] {
      auto r = batch_norm(x, p);
      double s = 0;
      for (std::size_t i = 0; i < r.out.numel(); ++i) s += r.out[i] * upstream[i];
      return s;
    };
    auto r = batch_norm(x, p);
    auto g = batch_norm_backward(upstream, r.cache, p);
    for (auto [value, analytic] : {std::pair{&x, &g.input},
                                   std::pair{&p.gamma, &g.gamma},
                                   std::pair{&p.beta, &g.beta}}) {
      for (std::size_t i = 0; i < value->numel(); i += 2) {
        const double saved = (*value)[i];
        const double h = 1e-5 * std::max(std::abs(saved), 1.0);
        (*value)[i] = saved + h;
        const double up = loss();
        (*value)[i] = saved - h;
        const double down = loss();
        (*value)[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double rel = std::abs(g.input[0] * 0 + (*analytic)[i] - numeric) /
                           std::max({std::abs((*analytic)[i]), std::abs(numeric), 1e-8});
        CHECK(rel <= 1e-6);
      }
    }
  }
}

TEST_CASE("forward ops are pure: identical reruns bit for bit") {
  Rng rng(14);
  auto x = random_tensor({2, 4, 6, 6}, rng);
  auto w = random_tensor({4, 2, 3, 3}, rng);
  const Conv2dSpec spec{2, {1, 1}, {1, 1}};
  CHECK(testutil::bit_identical(conv2d_grouped(x, w, nullptr, spec),
                                conv2d_grouped(x, w, nullptr, spec)));
  CHECK(testutil::bit_identical(softmax(x, 1), softmax(x, 1)));
  CHECK(testutil::bit_identical(sigmoid(x), sigmoid(x)));
}

TEST_CASE("relu and its backward") {
  Tensor<double> x({4}, {-1.0, 0.0, 0.5, 2.0});
  Tensor<double> gy({4}, {1.0, 1.0, 1.0, 1.0});
  auto y = relu(x);
  CHECK(y[0] == 0.0);
  CHECK(y[2] == 0.5);
  auto gx = relu_backward(gy, x);
  CHECK(gx[0] == 0.0);
  CHECK(gx[1] == 0.0);
  CHECK(gx[3] == 1.0);
}
