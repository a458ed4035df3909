#include <cmath>
#include <numeric>

#include "doctest.h"
#include "support.hpp"
#include "waveformer/errors.hpp"
#include "waveformer/ops.hpp"

using namespace waveformer;
using wf_test::check_gradients;
using wf_test::max_rel_error;
using wf_test::random_tensor;

namespace {

// Direct nested-loop convolution over an explicitly zero-padded copy.
std::vector<double> naive_depthwise(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride,
                                    std::size_t pad) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), kh = k.dim(1), kw = k.dim(2);
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  std::vector<double> padded(B * C * Hp * Wp, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
          padded[((b * C + c) * Hp + i + pad) * Wp + j + pad] = x.data()[((b * C + c) * H + i) * W + j];
  const std::size_t Ho = (Hp - kh) / stride + 1, Wo = (Wp - kw) / stride + 1;
  std::vector<double> out(B * C * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double acc = 0;
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v) {
              const std::size_t ii = i * stride + u, jj = j * stride + v;
              const bool inside = ii >= pad && ii < H + pad && jj >= pad && jj < W + pad;
              if (inside) acc += k.data()[(c * kh + u) * kw + v] * padded[((b * C + c) * Hp + ii) * Wp + jj];
            }
          out[((b * C + c) * Ho + i) * Wo + j] = acc;
        }
  return out;
}

Tensor<double> delta3x3(std::size_t channels) {
  std::vector<double> v(channels * 9, 0.0);
  for (std::size_t c = 0; c < channels; ++c) v[c * 9 + 4] = 1.0;
  return Tensor<double>({channels, 3, 3}, v);
}

}  // namespace

TEST_CASE("matmul: identity and projector") {
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> m({2, 2}, {1, 2, 3, 4});
  auto r = ops::matmul(eye, m);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 2, 3, 4});

  Tensor<double> p({2, 2}, {1, 0, 0, 0});
  Tensor<double> v({2, 1}, {5, 7});
  auto q = ops::matmul(p, v);
  CHECK(q.shape() == Shape{2, 1});
  CHECK(q.at(0) == 5.0);
  CHECK(q.at(1) == 0.0);
}

TEST_CASE("matmul: shape mismatch is a dimension error") {
  Tensor<double> a({2, 3});
  Tensor<double> b({2, 2});
  CHECK_THROWS_AS(ops::matmul(a, b), DimensionError);
}

TEST_CASE("matmul: backward matches finite differences on random 3x4 by 4x2") {
  Rng rng(11);
  auto a = random_tensor(rng, {3, 4}, true);
  auto b = random_tensor(rng, {4, 2}, true);
  auto w = random_tensor(rng, {3, 2});
  auto checks = check_gradients({{"a", a}, {"b", b}}, [&] { return ops::dot(ops::matmul(a, b), w); });
  CHECK(max_rel_error(checks) <= 1e-6);
}

TEST_CASE("depthwise_conv2d: delta kernel is the identity") {
  Rng rng(1);
  auto x = random_tensor(rng, {2, 3, 5, 4});
  auto y = ops::depthwise_conv2d(x, delta3x3(3), 1, 1);
  CHECK(y.shape() == x.shape());
  CHECK(wf_test::max_abs_diff(x, y) == 0.0);
}

TEST_CASE("depthwise_conv2d: 2x2 ones kernel with stride 2 is a sum pool") {
  Tensor<double> x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> k = Tensor<double>::full({1, 2, 2}, 1.0);
  auto y = ops::depthwise_conv2d(x, k, 2, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 10.0);
}

TEST_CASE("depthwise_conv2d: random case matches the nested-loop oracle exactly") {
  Rng rng(5);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u, 2u}) {
      auto x = random_tensor(rng, {2, 3, 7, 6});
      auto k = random_tensor(rng, {3, 3, 2});
      auto y = ops::depthwise_conv2d(x, k, stride, pad);
      auto expected = naive_depthwise(x, k, stride, pad);
      REQUIRE(y.numel() == expected.size());
      for (std::size_t i = 0; i < expected.size(); ++i) CHECK(y.data()[i] == expected[i]);
    }
}

TEST_CASE("depthwise_conv2d: output channel depends only on its input channel") {
  Rng rng(8);
  auto x = random_tensor(rng, {1, 3, 5, 5});
  auto k = random_tensor(rng, {3, 3, 3});
  auto y0 = ops::depthwise_conv2d(x, k, 1, 1);
  auto x2 = x.clone();
  x2.mutable_data()[25 + 7] += 1.0;  // channel 1
  auto y1 = ops::depthwise_conv2d(x2, k, 1, 1);
  for (std::size_t c = 0; c < 3; ++c) {
    double d = 0;
    for (std::size_t i = 0; i < 25; ++i) d = std::max(d, std::abs(y0.data()[c * 25 + i] - y1.data()[c * 25 + i]));
    if (c == 1)
      CHECK(d > 0.0);
    else
      CHECK(d == 0.0);
  }
}

TEST_CASE("depthwise_conv2d: kernel larger than padded input is rejected") {
  Tensor<double> x({1, 1, 2, 2});
  Tensor<double> k({1, 5, 5});
  CHECK_THROWS_AS(ops::depthwise_conv2d(x, k, 1, 1), DimensionError);
  CHECK_THROWS_AS(ops::depthwise_conv2d(x, Tensor<double>({2, 3, 3}), 1, 1), DimensionError);
}

TEST_CASE("depthwise_conv2d_transposed: adjoint of the forward conv") {
  Rng rng(21);
  struct Case {
    std::size_t kh, kw, stride, pad;
  };
  for (Case c : {Case{2, 2, 2, 0}, Case{3, 3, 2, 1}, Case{3, 2, 1, 1}, Case{3, 3, 2, 0}}) {
    auto x = random_tensor(rng, {1, 2, 6, 6});
    auto k = random_tensor(rng, {2, c.kh, c.kw});
    auto cx = ops::depthwise_conv2d(x, k, c.stride, c.pad);
    auto y = random_tensor(rng, cx.shape());
    auto ty = ops::depthwise_conv2d_transposed(y, k, c.stride, c.pad, 6, 6);
    REQUIRE(ty.shape() == x.shape());
    const double lhs = wf_test::inner(cx, y);
    const double rhs = wf_test::inner(x, ty);
    CHECK(std::abs(lhs - rhs) <= 1e-6 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("depthwise_conv2d_transposed: delta kernel and upsampling") {
  Rng rng(3);
  auto x = random_tensor(rng, {1, 2, 4, 4});
  auto y = ops::depthwise_conv2d_transposed(x, delta3x3(2), 1, 1);
  CHECK(wf_test::max_abs_diff(x, y) == 0.0);

  Tensor<double> one({1, 1, 1, 1}, std::vector<double>{2.5});
  auto up = ops::depthwise_conv2d_transposed(one, Tensor<double>::full({1, 2, 2}, 1.0), 2, 0);
  CHECK(up.shape() == Shape{1, 1, 2, 2});
  for (double v : up.data()) CHECK(v == 2.5);
}

TEST_CASE("depthwise_conv2d_transposed: incompatible explicit output size is rejected") {
  Tensor<double> x({1, 1, 3, 3});
  Tensor<double> k({1, 2, 2});
  CHECK_THROWS_AS(ops::depthwise_conv2d_transposed(x, k, 2, 0, 9, 6), DimensionError);
}

TEST_CASE("softmax: uniform input and row properties") {
  Tensor<double> z({3}, {0, 0, 0});
  auto s = ops::softmax(z, 0);
  for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor(rng, {4, 7, 5}, false, -30.0, 30.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto p = ops::softmax(x, axis);
      const std::size_t len = x.dim(axis);
      std::size_t inner = 1;
      for (std::size_t a = axis + 1; a < 3; ++a) inner *= x.dim(a);
      const std::size_t outer = x.numel() / (len * inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double total = 0;
          for (std::size_t i = 0; i < len; ++i) {
            const double v = p.data()[(o * len + i) * inner + in];
            CHECK(v > 0.0);
            total += v;
          }
          CHECK(std::abs(total - 1.0) <= 1e-6);
        }
    }
  }
}

TEST_CASE("layer_norm: constant rows map to beta exactly") {
  for (double c : {0.1, 5.0, -3.7, 1e6}) {
    Tensor<double> x = Tensor<double>::full({2, 5}, c);
    Tensor<double> gamma({5}, {1, 2, 3, 4, 5});
    Tensor<double> beta({5}, {0.5, -1, 0.25, 7, 0});
    auto y = ops::layer_norm(x, gamma, beta, 1e-5);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t i = 0; i < 5; ++i) CHECK(y.data()[r * 5 + i] == beta.data()[i]);
  }
  Tensor<float> xf = Tensor<float>::full({1, 3}, 0.1f);
  auto yf = ops::layer_norm(xf, Tensor<float>::full({3}, 1.f), Tensor<float>({3}, {1.f, 2.f, 3.f}), 1e-5f);
  CHECK(yf.at(0) == 1.f);
  CHECK(yf.at(2) == 3.f);
}

TEST_CASE("layer_norm: rows normalized to zero mean and unit variance") {
  Rng rng(6);
  auto x = random_tensor(rng, {3, 16}, false, -4, 9);
  auto y = ops::layer_norm(x, Tensor<double>::full({16}, 1.0), Tensor<double>({16}), 1e-12);
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < 16; ++i) m += y.data()[r * 16 + i];
    m /= 16;
    for (std::size_t i = 0; i < 16; ++i) v += (y.data()[r * 16 + i] - m) * (y.data()[r * 16 + i] - m);
    CHECK(std::abs(m) < 1e-12);
    CHECK(std::abs(v / 16 - 1.0) < 1e-9);
  }
  CHECK_THROWS_AS(ops::layer_norm(x, Tensor<double>({16}), Tensor<double>({16}), 0.0), ParameterError);
}

TEST_CASE("gelu: zero at zero, monotone on [-5, 5]") {
  Tensor<double> zero({1}, std::vector<double>{0.0});
  CHECK(ops::gelu(zero).item() == 0.0);
  std::vector<double> grid;
  for (int i = 0; i <= 1000; ++i) grid.push_back(-5.0 + 10.0 * i / 1000.0);
  // exact GELU dips below zero for x < 0 (min near x ≈ -0.75); it is monotone
  // increasing from there on, and odd-point symmetric around the identity:
  // gelu(x) - gelu(-x) = x.
  auto g = ops::gelu(Tensor<double>({grid.size()}, grid));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const std::size_t mirror = grid.size() - 1 - i;
    CHECK(g.data()[i] - g.data()[mirror] == doctest::Approx(grid[i]).epsilon(1e-12));
  }
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (grid[i] > -0.75) CHECK(g.data()[i] > g.data()[i - 1]);
  CHECK(ops::gelu(Tensor<double>({1}, std::vector<double>{1.0})).item() == doctest::Approx(0.8413447460685429));
}

TEST_CASE("dropout: parameter errors, eval identity, inverted scaling") {
  Rng rng(9);
  auto x = random_tensor(rng, {4, 1000}, false, 1.0, 2.0);
  CounterStream stream(1, "test", 0);
  CHECK_THROWS_AS(ops::dropout(x, 1.0, true, stream), ParameterError);
  CHECK_THROWS_AS(ops::dropout(x, -0.1, true, stream), ParameterError);
  CHECK(ops::dropout(x, 0.5, false, stream).node() == x.node());

  auto ones = Tensor<double>::full({100000}, 1.0);
  auto d = ops::dropout(ones, 0.25, true, stream);
  std::size_t kept = 0;
  double total = 0;
  for (double v : d.data()) {
    if (v != 0.0) {
      ++kept;
      CHECK(v == doctest::Approx(1.0 / 0.75));
    }
    total += v;
  }
  CHECK(static_cast<double>(kept) / 100000.0 == doctest::Approx(0.75).epsilon(0.01));
  CHECK(total / 100000.0 == doctest::Approx(1.0).epsilon(0.01));

  // Same stream reproduces the mask; another stream differs.
  auto d2 = ops::dropout(ones, 0.25, true, CounterStream(1, "test", 0));
  auto d3 = ops::dropout(ones, 0.25, true, CounterStream(1, "other", 0));
  CHECK(wf_test::max_abs_diff(d, d2) == 0.0);
  CHECK(wf_test::max_abs_diff(d, d3) > 0.0);
}

TEST_CASE("backward: sum, inner product, and fan-out accumulation") {
  Rng rng(2);
  auto x = random_tensor(rng, {3, 4}, true);
  ops::sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  x.zero_grad();
  ops::dot(x, x).backward();
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x.data()[i]);

  x.zero_grad();
  auto y = ops::scale(x, 3.0);
  ops::sum(ops::add(y, ops::mul(y, y))).backward();  // d/dx (3x + 9x²) = 3 + 18x
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == doctest::Approx(3.0 + 18.0 * x.data()[i]));
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tensor<double> x({2, 2}, {1, 2, 3, 4}, true);
  auto y = ops::scale(x, 2.0);
  CHECK_THROWS_AS(y.backward(), ContractError);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor<double> x({2}, {1, 2}, true);
  Tensor<double> y;
  {
    NoGradGuard guard;
    y = ops::scale(x, 2.0);
  }
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("gradient suite: every primitive matches central finite differences") {
  Rng rng(77);
  SUBCASE("elementwise and reductions") {
    auto a = random_tensor(rng, {3, 5}, true);
    auto b = random_tensor(rng, {3, 5}, true);
    auto checks = check_gradients({{"a", a}, {"b", b}}, [&] {
      return ops::sum(ops::mul(ops::sub(ops::add(a, b), ops::scale(b, 0.3)), ops::add(a, a)));
    });
    CHECK(max_rel_error(checks) <= 1e-4);
  }
  SUBCASE("linear and batched matmul") {
    auto x = random_tensor(rng, {2, 3, 4}, true);
    auto w = random_tensor(rng, {4, 5}, true);
    auto bias = random_tensor(rng, {5}, true);
    auto p = random_tensor(rng, {2, 5, 3}, true);
    auto q = random_tensor(rng, {2, 6, 3}, true);
    auto r = random_tensor(rng, {2, 3, 6});
    auto checks = check_gradients({{"x", x}, {"w", w}, {"bias", bias}, {"p", p}, {"q", q}}, [&] {
      auto y = ops::linear(x, w, bias);                    // 2x3x5
      auto z = ops::batched_matmul(y, p);                  // 2x3x3
      auto s = ops::batched_matmul_nt(z, q);               // 2x3x6
      return ops::dot(s, r);
    });
    CHECK(max_rel_error(checks) <= 1e-4);
  }
  SUBCASE("convolutions, padding, channel affine") {
    auto x = random_tensor(rng, {2, 2, 5, 4}, true);
    auto k = random_tensor(rng, {2, 3, 3}, true);
    auto k2 = random_tensor(rng, {2, 2, 2}, true);
    auto s = random_tensor(rng, {2}, true);
    auto bias = random_tensor(rng, {2}, true);
    auto checks = check_gradients({{"x", x}, {"k", k}, {"k2", k2}, {"s", s}, {"bias", bias}}, [&] {
      auto y = ops::depthwise_conv2d(x, k, 1, 1);           // 2x2x5x4
      auto p = ops::pad2d(y, 0, 1, 0, 0);                   // 2x2x6x4
      auto d = ops::depthwise_conv2d(p, k2, 2, 0);          // 2x2x3x2
      auto u = ops::depthwise_conv2d_transposed(ops::channel_scale(d, s), k2, 2, 0);  // 2x2x6x4
      auto c = ops::crop2d(ops::channel_bias(u, bias), 0, 0, 5, 4);
      return ops::sum(ops::mul(ops::gelu(c), ops::add(c, x)));
    });
    CHECK(max_rel_error(checks) <= 1e-4);
  }
  SUBCASE("layer norm, softmax, cross entropy, permute") {
    auto x = random_tensor(rng, {2, 3, 6}, true, -2, 2);
    auto gamma = random_tensor(rng, {6}, true);
    auto beta = random_tensor(rng, {6}, true);
    std::vector<int> labels{2, 0, 5, 1, 3, 4};
    auto w = random_tensor(rng, {2, 6, 3});
    auto checks = check_gradients({{"x", x}, {"gamma", gamma}, {"beta", beta}}, [&] {
      auto y = ops::layer_norm(x, gamma, beta, 1e-5);
      auto sm = ops::softmax(y, 1);
      auto pm = ops::permute(y, {0, 2, 1});
      auto logits = ops::reshape(ops::add(pm, ops::permute(sm, {0, 2, 1})), {6, 6});
      return ops::add(ops::cross_entropy(logits, labels), ops::dot(pm, w));
    });
    CHECK(max_rel_error(checks) <= 1e-4);
  }
  SUBCASE("rotation, token ops, sample scaling, dropout") {
    auto x = random_tensor(rng, {2, 3, 4}, true);
    auto tok = random_tensor(rng, {4}, true);
    ops::RotaryAngles ang{4, 2, {}, {}};
    for (std::size_t m = 0; m < 4; ++m)
      for (std::size_t i = 0; i < 2; ++i) {
        ang.cos.push_back(std::cos(0.7 * m + i));
        ang.sin.push_back(std::sin(0.7 * m + i));
      }
    std::vector<double> f{0.5, 2.0};
    auto w = random_tensor(rng, {2, 4, 4});
    auto w2 = random_tensor(rng, {2, 4});
    auto checks = check_gradients({{"x", x}, {"tok", tok}}, [&] {
      auto s = ops::prepend_token(x, tok);                                  // 2x4x4
      auto r = ops::rotate_pairs(s, ang);
      auto d = ops::dropout(r, 0.3, true, CounterStream(3, "fd", 1));
      auto z = ops::scale_samples(d, std::span<const double>(f));
      return ops::add(ops::dot(z, w), ops::dot(ops::select_token(z, 1), w2));
    });
    CHECK(max_rel_error(checks) <= 1e-4);
  }
}

TEST_CASE("determinism: identical inputs give bit-identical forward and backward") {
  auto run = [] {
    Rng rng(123);
    auto x = random_tensor(rng, {2, 2, 6, 5}, true);
    auto k = random_tensor(rng, {2, 3, 3}, true);
    auto w = random_tensor(rng, {5, 7}, true);
    auto y = ops::linear(ops::gelu(ops::depthwise_conv2d(x, k, 1, 1)), w, Tensor<double>());
    auto loss = ops::sum(ops::softmax(y, 3));
    auto loss2 = ops::add(loss, ops::dot(y, y));
    loss2.backward();
    std::vector<double> out(y.data().begin(), y.data().end());
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  CHECK(run() == run());
}
