#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "waveformer/module.hpp"
#include "waveformer/ops.hpp"
#include "waveformer/tensor.hpp"

namespace waveformer {

struct EncoderConfig {
  std::size_t layers = 6;
  std::size_t embed_dim = 256;
  std::size_t heads = 8;
  std::size_t ffn_dim = 1024;
  double rope_base = 10000.0;
  double stochastic_depth = 0.1;
  bool use_rope = true;
  std::size_t max_positions = 41;  // class token + C·N patch tokens

  std::size_t head_dim() const { return heads ? embed_dim / heads : 0; }
  void validate() const;
};

// θ_i = base^(−2i/head_dim); row m of the table rotates by (offset + m)·θ_i.
ops::RotaryAngles rope_angles(std::size_t positions, std::size_t head_dim, double base, double offset = 0.0);
ops::RotaryAngles rope_angles(std::size_t positions, std::span<const double> theta, double offset = 0.0);

// v [B×heads×S×head_dim]; odd head_dim raises ConfigError.
template <typename T>
Tensor<T> rope_rotate(const Tensor<T>& v, const ops::RotaryAngles& angles);

// x [B×D×C×N] -> [B×(1 + C·N)×D]; token c·N + n + 1 is x[:, :, c, n] and
// token 0 is the class token.
template <typename T>
Tensor<T> flatten_tokens(const Tensor<T>& x, const Tensor<T>& class_token);

// Pre-norm block: z + Attn(LN(z)), then + FFN(LN(·)). Both branches are gated
// by per-sample stochastic depth in training.
template <typename T>
class EncoderLayer {
 public:
  EncoderLayer(const EncoderConfig& cfg, std::size_t index, Rng& rng);

  // Attention branch only, including the residual. `weights` (optional)
  // receives the softmax matrix [B·heads × S × S].
  Tensor<T> attention(const Tensor<T>& z, const ops::RotaryAngles* angles, const ForwardContext<T>& ctx,
                      Tensor<T>* weights = nullptr) const;
  Tensor<T> feed_forward(const Tensor<T>& z, const ForwardContext<T>& ctx) const;
  Tensor<T> forward(const Tensor<T>& z, const ops::RotaryAngles* angles, const ForwardContext<T>& ctx) const;

  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const;

 private:
  Tensor<T> drop_path(const Tensor<T>& branch, const char* name, const ForwardContext<T>& ctx) const;

  EncoderConfig cfg_;
  std::size_t index_;
  Tensor<T> ln1_gamma_, ln1_beta_;
  Tensor<T> wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
  Tensor<T> ln2_gamma_, ln2_beta_;
  Tensor<T> w1_, b1_, w2_, b2_;
};

// Class token, layer stack and final LayerNorm of token 0.
template <typename T>
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, Rng& rng);

  // x [B×D×C×N] -> class embedding [B×D].
  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;
  // tokens [B×S×D] (class token already in place) -> [B×D].
  Tensor<T> encode(const Tensor<T>& tokens, const ForwardContext<T>& ctx) const;

  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const;
  const EncoderConfig& config() const { return cfg_; }
  const std::vector<EncoderLayer<T>>& layers() const { return layers_; }
  const Tensor<T>& class_token() const { return class_token_; }

 private:
  EncoderConfig cfg_;
  ops::RotaryAngles angles_;
  Tensor<T> class_token_;
  std::vector<EncoderLayer<T>> layers_;
  Tensor<T> norm_gamma_, norm_beta_;
};

}  // namespace waveformer
