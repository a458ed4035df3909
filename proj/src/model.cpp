#include "waveformer/model.hpp"

#include <cmath>

#include "waveformer/errors.hpp"
#include "waveformer/ops.hpp"

namespace waveformer {

EncoderConfig ModelConfig::encoder_config() const {
  EncoderConfig e;
  e.layers = layers;
  e.embed_dim = embed_dim;
  e.heads = heads;
  e.ffn_dim = ffn_dim;
  e.rope_base = rope_base;
  e.stochastic_depth = stochastic_depth;
  e.use_rope = use_rope;
  e.max_positions = sequence_length();
  return e;
}

void ModelConfig::validate() const {
  if (channels == 0) throw ConfigError("channels must be positive");
  if (patch_width == 0) throw ConfigError("patch_width must be positive");
  if (window < patch_width)
    throw ConfigError("window " + std::to_string(window) + " is shorter than patch_width " +
                      std::to_string(patch_width));
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (use_waveletconv && wavelet_levels < 1) throw ConfigError("wavelet_levels must be at least 1");
  if (!(hf_dropout >= 0.0) || hf_dropout >= 1.0) throw ConfigError("hf_dropout must lie in [0, 1)");
  encoder_config().validate();
}

namespace {
const ModelConfig& validated(const ModelConfig& cfg) {
  cfg.validate();
  return cfg;
}
}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& cfg, std::uint64_t init_seed)
    : cfg_(validated(cfg)),
      rng_(init_seed),
      patch_(cfg.patch_config(), rng_),
      encoder_(cfg.encoder_config(), rng_) {
  if (cfg.use_waveletconv) wavelet_.emplace(cfg.wavelet_config());
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  head_weight_ = uniform_parameter<T>(rng_, {cfg.embed_dim, cfg.num_classes}, bound);
  head_bias_ = uniform_parameter<T>(rng_, {cfg.num_classes}, bound);

  patch_.collect(params_, "patch.");
  if (wavelet_) wavelet_->collect(params_, "wavelet.");
  encoder_.collect(params_, "encoder.");
  params_.push_back({"head.weight", head_weight_});
  params_.push_back({"head.bias", head_bias_});
}

template <typename T>
Tensor<T> Model<T>::embed(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  auto h = patch_.forward(x, ctx);
  if (wavelet_) h = wavelet_->forward(h, ctx);
  return encoder_.forward(h, ctx);
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  return ctx.ops().linear(embed(x, ctx), head_weight_, head_bias_);
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
std::map<std::string, std::size_t> Model<T>::parameter_breakdown() const {
  std::map<std::string, std::size_t> groups;
  for (const auto& p : params_) groups[p.name.substr(0, p.name.find('.'))] += p.tensor.numel();
  return groups;
}

template class Model<float>;
template class Model<double>;

}  // namespace waveformer
