#include <cmath>
#include <numbers>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "waveformer/errors.hpp"
#include "waveformer/model.hpp"

using namespace waveformer;
using wf_test::check_gradients;
using wf_test::expected_parameters;
using wf_test::max_abs_diff;
using wf_test::random_tensor;

namespace {

EncoderConfig small_encoder(std::size_t layers = 1) {
  EncoderConfig cfg;
  cfg.layers = layers;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 16;
  cfg.max_positions = 9;
  return cfg;
}

Tensor<double> find(const std::vector<NamedTensor<double>>& params, const std::string& name) {
  for (const auto& p : params)
    if (p.name == name) return p.tensor;
  FAIL("no parameter " << name);
  return {};
}

void zero(Tensor<double> t) {
  for (auto& v : t.mutable_data()) v = 0;
}

double pair_dot(const Tensor<double>& a, std::size_t sa, const Tensor<double>& b, std::size_t sb, std::size_t hd) {
  double s = 0;
  for (std::size_t i = 0; i < hd; ++i) s += a.data()[sa * hd + i] * b.data()[sb * hd + i];
  return s;
}

// Layer norm without affine terms (gamma 1, beta 0 at init).
std::vector<double> plain_norm(std::span<const double> v) {
  double m = 0, q = 0;
  for (double x : v) m += x / double(v.size());
  for (double x : v) q += (x - m) * (x - m) / double(v.size());
  std::vector<double> out;
  for (double x : v) out.push_back((x - m) / std::sqrt(q + 1e-5));
  return out;
}

ForwardContext<double> eval_ctx() { return {}; }

}  // namespace

TEST_CASE("flatten: sequence length and channel-major order") {
  Rng rng(1);
  const auto x = random_tensor(rng, {2, 4, 8, 5});
  const auto cls = random_tensor(rng, {4});
  const auto z = flatten_tokens(x, cls);
  CHECK(z.shape() == Shape{2, 41, 4});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t d = 0; d < 4; ++d) {
      CHECK(z.data()[(b * 41) * 4 + d] == cls.data()[d]);
      for (std::size_t c = 0; c < 8; ++c)
        for (std::size_t n = 0; n < 5; ++n)
          CHECK(z.data()[(b * 41 + c * 5 + n + 1) * 4 + d] == x.data()[((b * 4 + d) * 8 + c) * 5 + n]);
    }
  CHECK(flatten_tokens(random_tensor(rng, {1, 3, 1, 1}), random_tensor(rng, {3})).shape() == Shape{1, 2, 3});
}

TEST_CASE("rope: identity at position 0 and a quarter turn") {
  Rng rng(2);
  const auto angles = rope_angles(5, 8, 10000.0);
  const auto v = random_tensor(rng, {2, 3, 5, 8});
  const auto r = rope_rotate(v, angles);
  for (std::size_t g = 0; g < 6; ++g)
    for (std::size_t i = 0; i < 8; ++i) CHECK(r.data()[g * 40 + i] == v.data()[g * 40 + i]);

  const std::vector<double> theta{std::numbers::pi / 2};
  const auto quarter = rope_angles(2, theta);
  const auto out = rope_rotate(Tensor<double>({1, 1, 2, 2}, std::vector<double>{0, 0, 1, 0}), quarter);
  CHECK(std::abs(out.data()[2] - 0.0) <= 1e-15);
  CHECK(out.data()[3] == doctest::Approx(1.0));

  CHECK_THROWS_AS(rope_rotate(random_tensor(rng, {1, 1, 2, 3}), quarter), ConfigError);
  CHECK_THROWS_AS(rope_angles(4, 7, 10000.0), ConfigError);
}

TEST_CASE("rope: pair norms are preserved") {
  Rng rng(3);
  const auto angles = rope_angles(17, 16, 10000.0);
  const auto v = random_tensor(rng, {2, 2, 17, 16});
  const auto r = rope_rotate(v, angles);
  double worst = 0;
  for (std::size_t i = 0; i < v.numel(); i += 2) {
    const double a = std::hypot(v.data()[i], v.data()[i + 1]), b = std::hypot(r.data()[i], r.data()[i + 1]);
    worst = std::max(worst, std::abs(a - b));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("rope: scores depend only on the position difference") {
  Rng rng(4);
  const std::size_t hd = 16;
  const auto q = random_tensor(rng, {1, 1, 1, hd}), k = random_tensor(rng, {1, 1, 1, hd});
  for (double m : {0.0, 3.0, 11.0})
    for (double n : {0.0, 5.0, 40.0})
      for (double shift : {1.0, 7.0, 123.0}) {
        const auto a = pair_dot(rope_rotate(q, rope_angles(1, hd, 1e4, m)), 0, rope_rotate(k, rope_angles(1, hd, 1e4, n)),
                                0, hd);
        const auto b = pair_dot(rope_rotate(q, rope_angles(1, hd, 1e4, m + shift)), 0,
                                rope_rotate(k, rope_angles(1, hd, 1e4, n + shift)), 0, hd);
        CHECK(std::abs(a - b) <= 1e-6);
      }
}

TEST_CASE("attention: single token") {
  Rng rng(5);
  EncoderLayer<double> layer(small_encoder(), 0, rng);
  std::vector<NamedTensor<double>> params;
  layer.collect(params, "");
  const auto z = random_tensor(rng, {1, 1, 8});
  const auto angles = rope_angles(1, 4, 1e4);
  Tensor<double> weights;
  const auto out = layer.attention(z, &angles, eval_ctx(), &weights);
  CHECK(weights.shape() == Shape{2, 1, 1});
  for (double w : weights.data()) CHECK(w == doctest::Approx(1.0));

  const auto h = plain_norm(z.data());
  const auto wv = find(params, "attn.v.weight"), bv = find(params, "attn.v.bias");
  const auto wo = find(params, "attn.out.weight"), bo = find(params, "attn.out.bias");
  std::vector<double> v(8);
  for (std::size_t j = 0; j < 8; ++j) {
    v[j] = bv.data()[j];
    for (std::size_t i = 0; i < 8; ++i) v[j] += h[i] * wv.data()[i * 8 + j];
  }
  for (std::size_t j = 0; j < 8; ++j) {
    double o = bo.data()[j] + z.data()[j];
    for (std::size_t i = 0; i < 8; ++i) o += v[i] * wo.data()[i * 8 + j];
    CHECK(out.data()[j] == doctest::Approx(o).epsilon(1e-12));
  }
}

TEST_CASE("attention: zero value projection is a no-op; rows sum to one") {
  Rng rng(6);
  EncoderLayer<double> layer(small_encoder(), 0, rng);
  std::vector<NamedTensor<double>> params;
  layer.collect(params, "");
  const auto z = random_tensor(rng, {3, 9, 8});
  const auto angles = rope_angles(9, 4, 1e4);
  Tensor<double> weights;
  layer.attention(z, &angles, eval_ctx(), &weights);
  for (std::size_t r = 0; r < 3 * 2 * 9; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) s += weights.data()[r * 9 + c];
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  zero(find(params, "attn.v.weight"));
  zero(find(params, "attn.v.bias"));
  zero(find(params, "attn.out.bias"));
  CHECK(max_abs_diff(layer.attention(z, &angles, eval_ctx()), z) == 0.0);
}

TEST_CASE("encoder: dead branches leave the normalized class token") {
  Rng rng(7);
  auto cfg = small_encoder(2);
  Encoder<double> enc(cfg, rng);
  std::vector<NamedTensor<double>> params;
  enc.collect(params, "");
  for (auto& p : params)
    if (p.name.find("out.") != std::string::npos || p.name.find("down.") != std::string::npos) zero(p.tensor);
  const auto expected = plain_norm(enc.class_token().data());
  for (int trial = 0; trial < 2; ++trial) {
    const auto y = enc.forward(random_tensor(rng, {2, 8, 2, 4}), eval_ctx());
    CHECK(y.shape() == Shape{2, 8});
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t d = 0; d < 8; ++d) CHECK(y.data()[b * 8 + d] == doctest::Approx(expected[d]).epsilon(1e-12));
  }
}

TEST_CASE("encoder: swapping two patch tokens changes the class embedding") {
  Rng rng(8);
  Encoder<double> enc(small_encoder(2), rng);
  const auto tokens = random_tensor(rng, {1, 9, 8});
  auto swapped = tokens.clone();
  for (std::size_t d = 0; d < 8; ++d) std::swap(swapped.mutable_data()[2 * 8 + d], swapped.mutable_data()[6 * 8 + d]);
  const auto a = enc.encode(tokens, eval_ctx()), b = enc.encode(swapped, eval_ctx());
  CHECK(max_abs_diff(a, b) > 1e-6);

  auto no_rope = small_encoder(2);
  no_rope.use_rope = false;
  Encoder<double> plain(no_rope, rng);
  CHECK(max_abs_diff(plain.encode(tokens, eval_ctx()), plain.encode(swapped, eval_ctx())) <= 1e-12);
}

TEST_CASE("encoder: config validation") {
  auto cfg = small_encoder();
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_encoder();
  cfg.heads = 8;  // head_dim 1
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_encoder();
  cfg.stochastic_depth = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("stochastic depth: eval is deterministic, p = 0 training equals eval") {
  Rng rng(9);
  auto cfg = small_encoder(2);
  Encoder<double> enc(cfg, rng);
  const auto tokens = random_tensor(rng, {4, 9, 8});
  ForwardContext<double> train;
  train.training = true;
  train.seed = 17;
  const auto e1 = enc.encode(tokens, eval_ctx()), e2 = enc.encode(tokens, eval_ctx());
  CHECK(max_abs_diff(e1, e2) == 0.0);

  cfg.stochastic_depth = 0.0;
  Rng same(9);
  Encoder<double> det(cfg, same);
  CHECK(max_abs_diff(det.encode(tokens, train), det.encode(tokens, eval_ctx())) == 0.0);

  cfg.stochastic_depth = 0.5;
  Rng again(9);
  Encoder<double> sd(cfg, again);
  bool differs = false;
  for (std::uint64_t step = 0; step < 8 && !differs; ++step) {
    train.step = step;
    differs = max_abs_diff(sd.encode(tokens, train), sd.encode(tokens, eval_ctx())) > 0;
  }
  CHECK(differs);
}

TEST_CASE("cross-entropy: uniform, confident and shifted logits") {
  const std::vector<int> label0{0};
  const auto uniform = ops::cross_entropy(Tensor<double>({1, 6}), label0).item();
  CHECK(std::abs(uniform - std::log(6.0)) <= 1e-6);
  const auto confident =
      ops::cross_entropy(Tensor<double>({1, 6}, std::vector<double>{100, 0, 0, 0, 0, 0}), label0).item();
  CHECK(confident <= 1e-6);
  Rng rng(10);
  const auto logits = random_tensor(rng, {4, 6}, false, -3, 3);
  const std::vector<int> labels{0, 5, 2, 2};
  auto shifted = logits.clone();
  for (auto& v : shifted.mutable_data()) v += 42.5;
  CHECK(std::abs(ops::cross_entropy(logits, labels).item() - ops::cross_entropy(shifted, labels).item()) <= 1e-6);
  for (std::size_t b = 0; b < 4; ++b) {
    const auto row = logits.data().subspan(b * 6, 6), srow = shifted.data().subspan(b * 6, 6);
    CHECK(std::max_element(row.begin(), row.end()) - row.begin() ==
          std::max_element(srow.begin(), srow.end()) - srow.begin());
  }
  const std::vector<int> bad{6};
  CHECK_THROWS_AS(ops::cross_entropy(Tensor<double>({1, 6}), bad), InputError);
}

TEST_CASE("parameters: enumeration matches the closed form") {
  ModelConfig defaults;
  Model<float> full(defaults, 0);
  CHECK(full.parameter_count() == expected_parameters(defaults));
  CHECK(full.parameter_count() == 4793350);

  ModelConfig tiny;
  tiny.layers = 1;
  tiny.embed_dim = 8;
  tiny.heads = 2;
  tiny.ffn_dim = 32;
  tiny.channels = 2;
  tiny.window = 8;
  tiny.patch_width = 4;
  tiny.wavelet_levels = 1;
  tiny.num_classes = 2;
  CHECK(Model<double>(tiny, 1).parameter_count() == expected_parameters(tiny));

  ModelConfig ablated = defaults;
  ablated.use_waveletconv = false;
  ablated.use_rope = false;
  ablated.layers = 2;
  ablated.embed_dim = 64;
  ablated.ffn_dim = 128;
  const Model<float> m(ablated, 2);
  CHECK(m.parameter_count() == expected_parameters(ablated));
  CHECK(m.parameter_breakdown().count("wavelet") == 0);

  std::set<std::string> names;
  for (const auto& p : full.parameters()) CHECK(names.insert(p.name).second);
}

TEST_CASE("model: logits shape and invalid configs") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.embed_dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  Model<float> model(cfg, 3);
  Rng rng(11);
  CHECK(model.forward(random_tensor<float>(rng, {3, 8, 200}), {}).shape() == Shape{3, 6});
  cfg.num_classes = 1;
  CHECK_THROWS_AS(Model<float>(cfg, 0), ConfigError);
  cfg.num_classes = 6;
  cfg.window = 30;
  CHECK_THROWS_AS(Model<float>(cfg, 0), ConfigError);
}

TEST_CASE("model: end-to-end finite-difference gradients on a tiny config") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.channels = 2;
  cfg.window = 8;
  cfg.patch_width = 4;
  cfg.wavelet_levels = 1;
  cfg.num_classes = 2;
  Model<double> model(cfg, 4);
  Rng rng(12);
  std::vector<std::pair<std::string, Tensor<double>>> leaves;
  for (const auto& p : model.parameters()) {
    auto t = p.tensor;
    for (auto& v : t.mutable_data()) v += rng.uniform(-0.1, 0.1);
    leaves.emplace_back(p.name, t);
  }
  const auto x = random_tensor(rng, {3, 2, 8});
  const std::vector<int> labels{0, 1, 1};
  ForwardContext<double> ctx;
  ctx.training = true;
  ctx.seed = 2;
  const auto checks = check_gradients(leaves, [&] { return ops::cross_entropy(model.forward(x, ctx), labels); });
  for (const auto& c : checks) {
    INFO(c.name);
    CHECK(c.rel_error <= 1e-4);
  }
}
