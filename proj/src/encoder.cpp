#include "waveformer/encoder.hpp"

#include <cmath>

#include "waveformer/errors.hpp"

namespace waveformer {

void EncoderConfig::validate() const {
  if (layers == 0 || embed_dim == 0 || heads == 0 || ffn_dim == 0)
    throw ConfigError("encoder layers, embed_dim, heads and ffn_dim must be positive");
  if (embed_dim % heads != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                      std::to_string(heads));
  if (head_dim() % 2 != 0)
    throw ConfigError("head_dim " + std::to_string(head_dim()) + " must be even for rotary embedding");
  if (!(rope_base > 1.0)) throw ConfigError("rope_base must exceed 1");
  if (!(stochastic_depth >= 0.0) || stochastic_depth >= 1.0)
    throw ConfigError("stochastic_depth must lie in [0, 1)");
  if (max_positions == 0) throw ConfigError("max_positions must be positive");
}

ops::RotaryAngles rope_angles(std::size_t positions, std::span<const double> theta, double offset) {
  ops::RotaryAngles a;
  a.positions = positions;
  a.pairs = theta.size();
  a.cos.resize(positions * a.pairs);
  a.sin.resize(positions * a.pairs);
  for (std::size_t m = 0; m < positions; ++m)
    for (std::size_t i = 0; i < a.pairs; ++i) {
      const double angle = (offset + static_cast<double>(m)) * theta[i];
      a.cos[m * a.pairs + i] = std::cos(angle);
      a.sin[m * a.pairs + i] = std::sin(angle);
    }
  return a;
}

ops::RotaryAngles rope_angles(std::size_t positions, std::size_t head_dim, double base, double offset) {
  if (head_dim % 2 != 0) throw ConfigError("rotary embedding needs an even head_dim, got " + std::to_string(head_dim));
  std::vector<double> theta(head_dim / 2);
  for (std::size_t i = 0; i < theta.size(); ++i)
    theta[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  return rope_angles(positions, theta, offset);
}

template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& v, const ops::RotaryAngles& angles) {
  if (v.rank() != 4) throw DimensionError("rope_rotate expects B×heads×S×head_dim, got " + shape_str(v.shape()));
  if (v.dim(3) % 2 != 0) throw ConfigError("rotary embedding needs an even head_dim, got " + std::to_string(v.dim(3)));
  const Shape shape = v.shape();
  return ops::reshape(ops::rotate_pairs(ops::reshape(v, {shape[0] * shape[1], shape[2], shape[3]}), angles), shape);
}

template <typename T>
Tensor<T> flatten_tokens(const Tensor<T>& x, const Tensor<T>& class_token) {
  if (x.rank() != 4) throw DimensionError("flatten_tokens expects B×D×C×N, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), D = x.dim(1), S = x.dim(2) * x.dim(3);
  return ops::prepend_token(ops::reshape(ops::permute(x, {0, 2, 3, 1}), {B, S, D}), class_token);
}

// ------------------------------------------------------------ encoder layer

template <typename T>
EncoderLayer<T>::EncoderLayer(const EncoderConfig& cfg, std::size_t index, Rng& rng) : cfg_(cfg), index_(index) {
  const std::size_t D = cfg.embed_dim, F = cfg.ffn_dim;
  const double bd = 1.0 / std::sqrt(static_cast<double>(D)), bf = 1.0 / std::sqrt(static_cast<double>(F));
  ln1_gamma_ = Tensor<T>::full({D}, T(1), true);
  ln1_beta_ = Tensor<T>({D}, true);
  wq_ = uniform_parameter<T>(rng, {D, D}, bd);
  bq_ = uniform_parameter<T>(rng, {D}, bd);
  wk_ = uniform_parameter<T>(rng, {D, D}, bd);
  bk_ = uniform_parameter<T>(rng, {D}, bd);
  wv_ = uniform_parameter<T>(rng, {D, D}, bd);
  bv_ = uniform_parameter<T>(rng, {D}, bd);
  wo_ = uniform_parameter<T>(rng, {D, D}, bd);
  bo_ = uniform_parameter<T>(rng, {D}, bd);
  ln2_gamma_ = Tensor<T>::full({D}, T(1), true);
  ln2_beta_ = Tensor<T>({D}, true);
  w1_ = uniform_parameter<T>(rng, {D, F}, bd);
  b1_ = uniform_parameter<T>(rng, {F}, bd);
  w2_ = uniform_parameter<T>(rng, {F, D}, bf);
  b2_ = uniform_parameter<T>(rng, {D}, bf);
}

template <typename T>
Tensor<T> EncoderLayer<T>::drop_path(const Tensor<T>& branch, const char* name, const ForwardContext<T>& ctx) const {
  const double p = cfg_.stochastic_depth;
  if (!ctx.training || p == 0.0) return branch;
  const auto stream = ctx.stream("encoder.layer" + std::to_string(index_) + "." + name);
  std::vector<T> factors(branch.dim(0));
  for (std::size_t b = 0; b < factors.size(); ++b)
    factors[b] = stream.uniform(b) >= p ? static_cast<T>(1.0 / (1.0 - p)) : T(0);
  return ops::scale_samples(branch, std::span<const T>(factors));
}

template <typename T>
Tensor<T> EncoderLayer<T>::attention(const Tensor<T>& z, const ops::RotaryAngles* angles, const ForwardContext<T>& ctx,
                                     Tensor<T>* weights) const {
  if (z.rank() != 3 || z.dim(2) != cfg_.embed_dim)
    throw DimensionError("encoder layer expects B×S×" + std::to_string(cfg_.embed_dim) + ", got " +
                         shape_str(z.shape()));
  const std::size_t B = z.dim(0), S = z.dim(1), D = cfg_.embed_dim, H = cfg_.heads, hd = cfg_.head_dim();
  const auto& wops = ctx.ops();
  const auto h = ops::layer_norm(z, ln1_gamma_, ln1_beta_);
  const auto split = [&](const Tensor<T>& t) { return ops::permute(ops::reshape(t, {B, S, H, hd}), {0, 2, 1, 3}); };
  auto q = split(wops.linear(h, wq_, bq_));
  auto k = split(wops.linear(h, wk_, bk_));
  const auto v = ops::reshape(split(wops.linear(h, wv_, bv_)), {B * H, S, hd});
  if (angles) {
    q = rope_rotate(q, *angles);
    k = rope_rotate(k, *angles);
  }
  const auto scores = ops::scale(ops::batched_matmul_nt(ops::reshape(q, {B * H, S, hd}), ops::reshape(k, {B * H, S, hd})),
                                 static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  const auto attn = ops::softmax(scores, 2);
  if (weights) *weights = attn;
  const auto mixed = ops::reshape(ops::permute(ops::reshape(ops::batched_matmul(attn, v), {B, H, S, hd}), {0, 2, 1, 3}),
                                  {B, S, D});
  return ops::add(z, drop_path(wops.linear(mixed, wo_, bo_), "attn", ctx));
}

template <typename T>
Tensor<T> EncoderLayer<T>::feed_forward(const Tensor<T>& z, const ForwardContext<T>& ctx) const {
  const auto& wops = ctx.ops();
  const auto h = ops::gelu(wops.linear(ops::layer_norm(z, ln2_gamma_, ln2_beta_), w1_, b1_));
  return ops::add(z, drop_path(wops.linear(h, w2_, b2_), "ffn", ctx));
}

template <typename T>
Tensor<T> EncoderLayer<T>::forward(const Tensor<T>& z, const ops::RotaryAngles* angles,
                                   const ForwardContext<T>& ctx) const {
  return feed_forward(attention(z, angles, ctx), ctx);
}

template <typename T>
void EncoderLayer<T>::collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const {
  out.push_back({prefix + "attn_norm.gamma", ln1_gamma_});
  out.push_back({prefix + "attn_norm.beta", ln1_beta_});
  out.push_back({prefix + "attn.q.weight", wq_});
  out.push_back({prefix + "attn.q.bias", bq_});
  out.push_back({prefix + "attn.k.weight", wk_});
  out.push_back({prefix + "attn.k.bias", bk_});
  out.push_back({prefix + "attn.v.weight", wv_});
  out.push_back({prefix + "attn.v.bias", bv_});
  out.push_back({prefix + "attn.out.weight", wo_});
  out.push_back({prefix + "attn.out.bias", bo_});
  out.push_back({prefix + "ffn_norm.gamma", ln2_gamma_});
  out.push_back({prefix + "ffn_norm.beta", ln2_beta_});
  out.push_back({prefix + "ffn.up.weight", w1_});
  out.push_back({prefix + "ffn.up.bias", b1_});
  out.push_back({prefix + "ffn.down.weight", w2_});
  out.push_back({prefix + "ffn.down.bias", b2_});
}

// ------------------------------------------------------------------ encoder

template <typename T>
Encoder<T>::Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  angles_ = rope_angles(cfg.max_positions, cfg.head_dim(), cfg.rope_base);
  std::vector<T> token(cfg.embed_dim);
  for (auto& v : token) v = static_cast<T>(0.02 * rng.normal());
  class_token_ = Tensor<T>({cfg.embed_dim}, std::move(token), true);
  layers_.reserve(cfg.layers);
  for (std::size_t i = 0; i < cfg.layers; ++i) layers_.emplace_back(cfg, i, rng);
  norm_gamma_ = Tensor<T>::full({cfg.embed_dim}, T(1), true);
  norm_beta_ = Tensor<T>({cfg.embed_dim}, true);
}

template <typename T>
Tensor<T> Encoder<T>::encode(const Tensor<T>& tokens, const ForwardContext<T>& ctx) const {
  if (tokens.rank() != 3 || tokens.dim(1) > cfg_.max_positions)
    throw DimensionError("sequence " + shape_str(tokens.shape()) + " exceeds " + std::to_string(cfg_.max_positions) +
                         " positions");
  const ops::RotaryAngles* angles = cfg_.use_rope ? &angles_ : nullptr;
  Tensor<T> z = tokens;
  for (const auto& layer : layers_) z = layer.forward(z, angles, ctx);
  return ops::layer_norm(ops::select_token(z, 0), norm_gamma_, norm_beta_);
}

template <typename T>
Tensor<T> Encoder<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  return encode(flatten_tokens(x, class_token_), ctx);
}

template <typename T>
void Encoder<T>::collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const {
  out.push_back({prefix + "class_token", class_token_});
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].collect(out, prefix + "layer" + std::to_string(i) + ".");
  out.push_back({prefix + "norm.gamma", norm_gamma_});
  out.push_back({prefix + "norm.beta", norm_beta_});
}

template Tensor<float> rope_rotate(const Tensor<float>&, const ops::RotaryAngles&);
template Tensor<double> rope_rotate(const Tensor<double>&, const ops::RotaryAngles&);
template Tensor<float> flatten_tokens(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> flatten_tokens(const Tensor<double>&, const Tensor<double>&);
template class EncoderLayer<float>;
template class EncoderLayer<double>;
template class Encoder<float>;
template class Encoder<double>;

}  // namespace waveformer
