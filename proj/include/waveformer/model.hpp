#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "waveformer/encoder.hpp"
#include "waveformer/module.hpp"
#include "waveformer/wavelet.hpp"

namespace waveformer {

struct ModelConfig {
  std::size_t channels = 8;
  std::size_t window = 200;
  std::size_t patch_width = 40;
  std::size_t embed_dim = 256;
  std::size_t wavelet_levels = 3;
  double hf_dropout = 0.1;
  std::size_t layers = 6;
  std::size_t heads = 8;
  std::size_t ffn_dim = 1024;
  double rope_base = 10000.0;
  double stochastic_depth = 0.1;
  std::size_t num_classes = 6;
  bool use_waveletconv = true;
  bool use_rope = true;

  std::size_t num_patches() const { return (window + patch_width - 1) / patch_width; }
  std::size_t sequence_length() const { return 1 + channels * num_patches(); }
  PatchEmbedConfig patch_config() const { return {patch_width, embed_dim, window, channels}; }
  WaveletConfig wavelet_config() const { return {embed_dim, wavelet_levels, hf_dropout, channels, num_patches()}; }
  EncoderConfig encoder_config() const;
  void validate() const;
};

// Patch embedding -> optional WaveletConv -> RoPE encoder -> linear head.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t init_seed);
  // Parameters are shared handles, so a copy would alias them.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  // x [B×C×T] -> logits [B×K].
  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;
  // x [B×C×T] -> class embedding [B×D].
  Tensor<T> embed(const Tensor<T>& x, const ForwardContext<T>& ctx) const;

  const ModelConfig& config() const { return cfg_; }
  // Stable order; names are unique and dot-separated.
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  // Totals per top-level group (patch, wavelet, encoder, head).
  std::map<std::string, std::size_t> parameter_breakdown() const;

  const PatchEmbed<T>& patch_embed() const { return patch_; }
  const WaveletConv<T>* wavelet() const { return wavelet_ ? &*wavelet_ : nullptr; }
  WaveletConv<T>* wavelet() { return wavelet_ ? &*wavelet_ : nullptr; }
  const Encoder<T>& encoder() const { return encoder_; }

 private:
  ModelConfig cfg_;
  Rng rng_;
  PatchEmbed<T> patch_;
  std::optional<WaveletConv<T>> wavelet_;
  Encoder<T> encoder_;
  Tensor<T> head_weight_;  // D × K
  Tensor<T> head_bias_;
  std::vector<NamedTensor<T>> params_;
};

}  // namespace waveformer
