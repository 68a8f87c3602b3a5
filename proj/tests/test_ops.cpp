#include <algorithm>
#include <cmath>

#include "bundleseg/ops.hpp"
#include "bundleseg/rng.hpp"
#include "doctest.h"

using namespace bundleseg;
using ops::Mode;

namespace {

template <typename S>
Tensor4<S> random_tensor(int n, int c, int h, int w, std::uint64_t seed) {
  Tensor4<S> t(n, c, h, w);
  SplitMix64 rng(seed);
  for (auto& v : t.data) v = static_cast<S>(rng.normal());
  return t;
}

template <typename S>
ParamTensor<S> random_param(std::vector<int> shape, std::uint64_t seed) {
  ParamTensor<S> p(std::move(shape));
  SplitMix64 rng(seed);
  for (auto& v : p.values) v = static_cast<S>(rng.normal());
  return p;
}

// Direct-summation convolution with zero padding.
Tensor4<double> naive_conv(const Tensor4<double>& x, const ParamTensor<double>& w, const ParamTensor<double>& b) {
  const int co = w.dim(0), k = w.dim(2), r = k / 2;
  Tensor4<double> y(x.n, co, x.h, x.w);
  for (int n = 0; n < x.n; ++n)
    for (int o = 0; o < co; ++o)
      for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j) {
          double s = b.values[o];
          for (int c = 0; c < x.c; ++c)
            for (int di = 0; di < k; ++di)
              for (int dj = 0; dj < k; ++dj) {
                const int ii = i + di - r, jj = j + dj - r;
                if (ii < 0 || jj < 0 || ii >= x.h || jj >= x.w) continue;
                s += w.values[((o * x.c + c) * k + di) * k + dj] * x(n, c, ii, jj);
              }
          y(n, o, i, j) = s;
        }
  return y;
}

// Stride-2 2x2 convolution whose weights are laid out (Cin_of_upconv, Cout_of_upconv, 2, 2):
// it maps a (Cout)-channel image to a (Cin)-channel one at half resolution.
Tensor4<double> strided_conv(const Tensor4<double>& y, const ParamTensor<double>& w) {
  const int ci = w.dim(0), co = w.dim(1);
  Tensor4<double> x(y.n, ci, y.h / 2, y.w / 2);
  for (int n = 0; n < y.n; ++n)
    for (int a = 0; a < ci; ++a)
      for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j) {
          double s = 0;
          for (int o = 0; o < co; ++o)
            for (int di = 0; di < 2; ++di)
              for (int dj = 0; dj < 2; ++dj) s += w.values[((a * co + o) * 2 + di) * 2 + dj] * y(n, o, 2 * i + di, 2 * j + dj);
          x(n, a, i, j) = s;
        }
  return x;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d of ones with a ones kernel counts neighbours") {
  Tensor4<float> x(1, 1, 3, 3, 1.0f);
  ParamTensor<float> w({1, 1, 3, 3}, 1.0f), b({1});
  const auto y = ops::conv2d(x, w, b);
  CHECK(y(0, 0, 1, 1) == 9.0f);
  CHECK(y(0, 0, 0, 1) == 6.0f);
  CHECK(y(0, 0, 1, 0) == 6.0f);
  CHECK(y(0, 0, 0, 0) == 4.0f);
  CHECK(y(0, 0, 2, 2) == 4.0f);
}

TEST_CASE("conv2d identity kernel is the identity") {
  const auto x = random_tensor<float>(2, 3, 5, 4, 1);
  ParamTensor<float> w({3, 3, 3, 3}), b({3});
  for (int c = 0; c < 3; ++c) w.values[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0f;
  CHECK(ops::conv2d(x, w, b).data == x.data);
}

TEST_CASE("conv2d matches direct summation") {
  const auto x = random_tensor<double>(2, 3, 5, 6, 2);
  const auto w = random_param<double>({4, 3, 3, 3}, 3);
  const auto b = random_param<double>({4}, 4);
  const auto y = ops::conv2d(x, w, b);
  const auto ref = naive_conv(x, w, b);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-12));

  const auto w1 = random_param<double>({2, 3, 1, 1}, 5);
  const auto b1 = random_param<double>({2}, 6);
  const auto y1 = ops::conv2d(x, w1, b1);
  const auto r1 = naive_conv(x, w1, b1);
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(y1.data[i] == doctest::Approx(r1.data[i]).epsilon(1e-12));
}

TEST_CASE("conv2d rejects channel mismatch") {
  Tensor4<float> x(1, 2, 3, 3);
  ParamTensor<float> w({1, 3, 3, 3}), b({1});
  CHECK_THROWS_AS(ops::conv2d(x, w, b), ShapeError);
}

TEST_CASE("conv2d backward is the adjoint of forward") {
  const auto x = random_tensor<double>(2, 3, 4, 5, 7);
  const auto w = random_param<double>({2, 3, 3, 3}, 8);
  ParamTensor<double> zero_b({2});
  const auto dy = random_tensor<double>(2, 2, 4, 5, 9);
  ParamTensor<double> dw({2, 3, 3, 3}), db({2});
  const auto dx = ops::conv2d_backward(x, w, dy, dw, db);
  // <conv(x), dy> = <x, dx> = <w, dw> for a bias-free linear map
  const double lhs = dot(ops::conv2d(x, w, zero_b).data, dy.data);
  CHECK(dot(x.data, dx.data) == doctest::Approx(lhs).epsilon(1e-12));
  CHECK(dot(w.values, dw.values) == doctest::Approx(lhs).epsilon(1e-12));
  double sum_dy = 0;
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) sum_dy += dy(n, 0, i, j);
  CHECK(db.values[0] == doctest::Approx(sum_dy).epsilon(1e-12));
}

TEST_CASE("relu") {
  Tensor4<float> x(1, 1, 1, 3);
  x.data = {-1.0f, 0.0f, 2.0f};
  CHECK(ops::relu(x).data == std::vector<float>{0.0f, 0.0f, 2.0f});

  Tensor4<float> neg(1, 2, 3, 3, -0.5f);
  const auto y = ops::relu(neg);
  for (float v : y.data) CHECK(v == 0.0f);
  const auto dx = ops::relu_backward(y, Tensor4<float>(1, 2, 3, 3, 1.0f));
  for (float v : dx.data) CHECK(v == 0.0f);
}

TEST_CASE("maxpool2 picks the window maximum") {
  Tensor4<float> x(1, 1, 2, 2);
  x.data = {1, 2, 3, 4};
  const auto p = ops::maxpool2(x);
  CHECK(p.out.data == std::vector<float>{4});
  const auto dx = ops::maxpool2_backward(p, x, Tensor4<float>(1, 1, 1, 1, 1.0f));
  CHECK(dx.data == std::vector<float>{0, 0, 0, 1});
}

TEST_CASE("maxpool2 ties go to the lowest flat index") {
  Tensor4<float> x(1, 1, 4, 4, 2.5f);
  const auto p = ops::maxpool2(x);
  for (float v : p.out.data) CHECK(v == 2.5f);
  const auto dx = ops::maxpool2_backward(p, x, Tensor4<float>(1, 1, 2, 2, 1.0f));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(dx(0, 0, i, j) == ((i % 2 == 0 && j % 2 == 0) ? 1.0f : 0.0f));
}

TEST_CASE("maxpool2 gradient lands on window maxima") {
  const auto x = random_tensor<float>(1, 1, 4, 4, 21);
  const auto p = ops::maxpool2(x);
  const auto dx = ops::maxpool2_backward(p, x, Tensor4<float>(1, 1, 2, 2, 1.0f));
  int ones = 0;
  for (int wi = 0; wi < 2; ++wi)
    for (int wj = 0; wj < 2; ++wj) {
      int bi = 2 * wi, bj = 2 * wj;
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj)
          if (x(0, 0, 2 * wi + di, 2 * wj + dj) > x(0, 0, bi, bj)) bi = 2 * wi + di, bj = 2 * wj + dj;
      CHECK(p.out(0, 0, wi, wj) == x(0, 0, bi, bj));
      CHECK(dx(0, 0, bi, bj) == 1.0f);
    }
  for (float v : dx.data) ones += v == 1.0f;
  CHECK(ones == 4);
}

TEST_CASE("maxpool2 rejects odd sizes") {
  CHECK_THROWS_AS(ops::maxpool2(Tensor4<float>(1, 1, 3, 4)), ShapeError);
  CHECK_THROWS_AS(ops::maxpool2(Tensor4<float>(1, 1, 4, 5)), ShapeError);
}

TEST_CASE("upconv2 shapes and broadcast") {
  Tensor4<float> x(1, 1, 1, 1, 3.5f);
  ParamTensor<float> w({1, 1, 2, 2}, 1.0f);
  CHECK(ops::upconv2(x, w).data == std::vector<float>(4, 3.5f));

  const auto y = ops::upconv2(Tensor4<float>(2, 4, 5, 7), ParamTensor<float>({4, 3, 2, 2}));
  CHECK(y.n == 2);
  CHECK(y.c == 3);
  CHECK(y.h == 10);
  CHECK(y.w == 14);
  CHECK_THROWS_AS(ops::upconv2(Tensor4<float>(1, 2, 2, 2), ParamTensor<float>({3, 1, 2, 2})), ShapeError);
}

TEST_CASE("upconv2 is the adjoint of a stride-2 convolution") {
  const auto x = random_tensor<double>(2, 3, 3, 4, 31);
  const auto w = random_param<double>({3, 2, 2, 2}, 32);
  const auto y = ops::upconv2(x, w);
  const auto g = random_tensor<double>(2, 2, 6, 8, 33);
  CHECK(dot(y.data, g.data) == doctest::Approx(dot(x.data, strided_conv(g, w).data)).epsilon(1e-12));

  ParamTensor<double> dw({3, 2, 2, 2});
  const auto dx = ops::upconv2_backward(x, w, g, dw);
  const auto expect = strided_conv(g, w);
  for (std::size_t i = 0; i < dx.size(); ++i) CHECK(dx.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-12));
}

TEST_CASE("concat_channels") {
  Tensor4<float> a(1, 2, 2, 2, 1.0f), b(1, 3, 2, 2, 2.0f);
  const auto y = ops::concat_channels(a, b);
  CHECK(y.c == 5);
  CHECK(y(0, 1, 1, 1) == 1.0f);
  CHECK(y(0, 2, 0, 0) == 2.0f);

  const auto x = random_tensor<float>(2, 3, 2, 3, 3);
  CHECK(ops::concat_channels(x, Tensor4<float>(2, 0, 2, 3)).data == x.data);

  const auto [da, db] = ops::concat_channels_backward(Tensor4<float>(1, 5, 2, 2, 1.0f), 2);
  CHECK(da.c == 2);
  CHECK(db.c == 3);
  for (float v : da.data) CHECK(v == 1.0f);
  for (float v : db.data) CHECK(v == 1.0f);
  CHECK_THROWS_AS(ops::concat_channels(a, Tensor4<float>(1, 1, 2, 3)), ShapeError);
}

TEST_CASE("dropout identity cases and probability checks") {
  const auto x = random_tensor<float>(2, 3, 4, 4, 41);
  CHECK(ops::dropout<float>(x, 0.0, 1, Mode::Train, nullptr).data == x.data);
  CHECK(ops::dropout<float>(x, 0.0, 1, Mode::Eval, nullptr).data == x.data);
  CHECK(ops::dropout<float>(x, 0.7, 1, Mode::Eval, nullptr).data == x.data);
  CHECK_THROWS_AS(ops::dropout<float>(x, 1.0, 1, Mode::Train, nullptr), ConfigError);
  CHECK_THROWS_AS(ops::dropout<float>(x, -0.1, 1, Mode::Train, nullptr), ConfigError);
}

TEST_CASE("dropout statistics on a million elements") {
  Tensor4<float> x(1, 1, 1000, 1000);
  SplitMix64 rng(43);
  double in_sum = 0;
  for (auto& v : x.data) {
    v = static_cast<float>(1.0 + rng.uniform());
    in_sum += v;
  }
  ops::DropoutMask<float> mask;
  const auto y = ops::dropout<float>(x, 0.4, 2024, Mode::Train, &mask);
  std::size_t dropped = 0;
  double out_sum = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    dropped += y.data[i] == 0.0f;
    out_sum += y.data[i];
  }
  CHECK(static_cast<double>(dropped) / 1e6 == doctest::Approx(0.4).epsilon(0.003 / 0.4));
  CHECK(std::abs(out_sum / in_sum - 1.0) < 0.01);

  // the mask is reused by backward and replays the same stream
  const auto dy = ops::dropout_backward(mask, Tensor4<float>(1, 1, 1000, 1000, 1.0f));
  for (std::size_t i = 0; i < y.size(); i += 997) CHECK((dy.data[i] == 0.0f) == (y.data[i] == 0.0f));
  CHECK(ops::dropout<float>(x, 0.4, 2024, Mode::Train, nullptr).data == y.data);
}

TEST_CASE("softmax2 values and stability") {
  Tensor4<float> z(1, 2, 1, 3);
  z.data = {0.0f, 1000.0f, -1000.0f, 0.0f, 0.0f, 1000.0f};
  const auto p = ops::softmax2(z);
  CHECK(p(0, 0, 0, 0) == 0.5f);
  CHECK(p(0, 1, 0, 0) == 0.5f);
  CHECK(p(0, 0, 0, 1) == 1.0f);
  CHECK(p(0, 1, 0, 1) == 0.0f);
  CHECK(p(0, 1, 0, 2) == 1.0f);
  for (float v : p.data) CHECK(std::isfinite(v));
  CHECK_THROWS_AS(ops::softmax2(Tensor4<float>(1, 3, 2, 2)), ShapeError);
}

TEST_CASE("softmax2 channels sum to one") {
  auto z = random_tensor<float>(3, 2, 7, 5, 51);
  for (auto& v : z.data) v *= 8.0f;
  const auto p = ops::softmax2(z);
  for (int n = 0; n < 3; ++n)
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 5; ++j) {
        CHECK(std::abs(p(n, 0, i, j) + p(n, 1, i, j) - 1.0f) <= 1e-6f);
        CHECK(p(n, 0, i, j) > 0.0f);
        CHECK(p(n, 1, i, j) > 0.0f);
      }
}

TEST_CASE("ops are deterministic") {
  const auto x = random_tensor<float>(4, 3, 8, 8, 61);
  const auto w = random_param<float>({5, 3, 3, 3}, 62);
  const auto b = random_param<float>({5}, 63);
  CHECK(ops::conv2d(x, w, b).data == ops::conv2d(x, w, b).data);
  const auto dy = random_tensor<float>(4, 5, 8, 8, 64);
  ParamTensor<float> dw1({5, 3, 3, 3}), db1({5}), dw2({5, 3, 3, 3}), db2({5});
  const auto dx1 = ops::conv2d_backward(x, w, dy, dw1, db1);
  const auto dx2 = ops::conv2d_backward(x, w, dy, dw2, db2);
  CHECK(dx1.data == dx2.data);
  CHECK(dw1.values == dw2.values);
  CHECK(db1.values == db2.values);
}
