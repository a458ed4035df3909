#include "waveformer/wavelet.hpp"

#include <bit>
#include <cmath>
#include <string>

#include "waveformer/errors.hpp"
#include "waveformer/ops.hpp"

namespace waveformer {

// -------------------------------------------------------------- patch embed

template <typename T>
PatchEmbed<T>::PatchEmbed(const PatchEmbedConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.patch_width == 0 || cfg.embed_dim == 0 || cfg.channels == 0)
    throw ConfigError("patch embedding needs positive patch width, embed dim and channels");
  if (cfg.window < cfg.patch_width)
    throw ConfigError("window " + std::to_string(cfg.window) + " is shorter than patch width " +
                      std::to_string(cfg.patch_width));
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.patch_width));
  weight_ = uniform_parameter<T>(rng, {cfg.patch_width, cfg.embed_dim}, bound);
  bias_ = uniform_parameter<T>(rng, {cfg.embed_dim}, bound);
  norm_gamma_ = Tensor<T>::full({cfg.embed_dim}, T(1), true);
  norm_beta_ = Tensor<T>({cfg.embed_dim}, true);
}

template <typename T>
Tensor<T> PatchEmbed<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  if (x.rank() != 3 || x.dim(1) != cfg_.channels)
    throw DimensionError("patch embedding expects B×" + std::to_string(cfg_.channels) + "×T input, got " +
                         shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), len = x.dim(2), P = cfg_.patch_width, D = cfg_.embed_dim;
  if (len < P)
    throw InputError("input length " + std::to_string(len) + " is shorter than patch width " + std::to_string(P));
  const std::size_t N = (len + P - 1) / P;
  Tensor<T> h = x;
  if (N * P != len) h = ops::reshape(ops::pad2d(ops::reshape(x, {B, C, 1, len}), 0, 0, 0, N * P - len), {B, C, N * P});
  h = ctx.ops().linear(ops::reshape(h, {B * C * N, P}), weight_, bias_);
  h = ops::gelu(ops::layer_norm(h, norm_gamma_, norm_beta_));
  return ops::permute(ops::reshape(h, {B, C, N, D}), {0, 3, 1, 2});
}

template <typename T>
void PatchEmbed<T>::collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const {
  out.push_back({prefix + "weight", weight_});
  out.push_back({prefix + "bias", bias_});
  out.push_back({prefix + "norm.gamma", norm_gamma_});
  out.push_back({prefix + "norm.beta", norm_beta_});
}

// ----------------------------------------------------------- filter bank

template <typename T>
WaveletFilterBank<T> WaveletFilterBank<T>::haar(std::size_t dim, bool requires_grad) {
  // Row sign pattern (channel axis) × column sign pattern (time axis).
  static constexpr int kRow[4][2] = {{1, 1}, {1, 1}, {1, -1}, {1, -1}};
  static constexpr int kCol[4][2] = {{1, 1}, {1, -1}, {1, 1}, {1, -1}};
  WaveletFilterBank bank;
  for (std::size_t b = 0; b < 4; ++b) {
    std::vector<T> k(dim * 4);
    for (std::size_t d = 0; d < dim; ++d)
      for (std::size_t u = 0; u < 2; ++u)
        for (std::size_t v = 0; v < 2; ++v) k[d * 4 + u * 2 + v] = T(0.5) * T(kRow[b][u] * kCol[b][v]);
    bank.dec[b] = Tensor<T>({dim, 2, 2}, k, requires_grad);
    bank.rec[b] = Tensor<T>({dim, 2, 2}, std::move(k), requires_grad);
  }
  return bank;
}

template <typename T>
Subbands<T> dwt_level(const Tensor<T>& x, const WaveletFilterBank<T>& bank, const WeightedOps<T>& ops) {
  if (x.rank() != 4) throw DimensionError("dwt_level expects B×D×H×W, got " + shape_str(x.shape()));
  Subbands<T> s;
  s.height = x.dim(2);
  s.width = x.dim(3);
  s.pad = PadRecord{0, s.height % 2, 0, s.width % 2};
  const Tensor<T> padded = (s.pad.bottom || s.pad.right) ? ops::pad2d(x, 0, s.pad.bottom, 0, s.pad.right) : x;
  for (std::size_t b = 0; b < 4; ++b) s.band[b] = ops.depthwise_conv2d(padded, bank.dec[b], 2, 0);
  return s;
}

template <typename T>
Tensor<T> iwt_level(const Subbands<T>& s, const WaveletFilterBank<T>& bank, const WeightedOps<T>& ops) {
  const Shape& shape = s.band[0].shape();
  for (std::size_t b = 1; b < 4; ++b)
    if (s.band[b].shape() != shape)
      throw DimensionError("iwt_level: subband " + std::string(kBandNames[b]) + " has shape " +
                           shape_str(s.band[b].shape()) + ", expected " + shape_str(shape));
  if (shape.size() != 4) throw DimensionError("iwt_level expects B×D×h×w subbands, got " + shape_str(shape));
  const std::size_t hp = 2 * shape[2], wp = 2 * shape[3];
  if (s.height + s.pad.top + s.pad.bottom != hp || s.width + s.pad.left + s.pad.right != wp)
    throw DimensionError("iwt_level: pad record does not match subband size " + shape_str(shape));
  Tensor<T> out;
  for (std::size_t b = 0; b < 4; ++b) {
    auto part = ops.depthwise_conv2d_transposed(s.band[b], bank.rec[b], 2, 0, hp, wp);
    out = out.defined() ? ops::add(out, part) : part;
  }
  if (hp == s.height && wp == s.width) return out;
  return ops::crop2d(out, s.pad.top, s.pad.left, s.height, s.width);
}

std::size_t max_wavelet_levels(std::size_t height, std::size_t width) {
  const std::size_t m = std::min(height, width);
  if (m == 0) throw DimensionError("wavelet levels of an empty map");
  return static_cast<std::size_t>(std::bit_width(m));  // ⌊log2 m⌋ + 1
}

// ------------------------------------------------------------ WaveletConv

namespace {

template <typename T>
Tensor<T> delta_kernel(std::size_t dim) {
  std::vector<T> k(dim * 9, T(0));
  for (std::size_t d = 0; d < dim; ++d) k[d * 9 + 4] = T(1);
  return Tensor<T>({dim, 3, 3}, std::move(k), true);
}

}  // namespace

template <typename T>
WaveletConv<T>::WaveletConv(const WaveletConfig& cfg) : cfg_(cfg) {
  if (cfg.dim == 0) throw ConfigError("wavelet conv needs a positive feature dimension");
  if (cfg.levels < 1) throw ConfigError("wavelet levels must be at least 1");
  if (!(cfg.hf_dropout >= 0.0) || cfg.hf_dropout >= 1.0)
    throw ConfigError("high-frequency dropout must lie in [0, 1), got " + std::to_string(cfg.hf_dropout));
  levels_ = std::min(cfg.levels, max_wavelet_levels(cfg.height, cfg.width));
  if (levels_ < cfg.levels)
    warn("wavelet levels clamped from " + std::to_string(cfg.levels) + " to " + std::to_string(levels_) + " for a " +
         std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + " map");
  bank_ = WaveletFilterBank<T>::haar(cfg.dim);
  refine_.resize(levels_);
  scale_.resize(levels_);
  for (std::size_t j = 0; j < levels_; ++j)
    for (std::size_t b = 0; b < 4; ++b) {
      refine_[j][b] = delta_kernel<T>(cfg.dim);
      scale_[j][b] = Tensor<T>::full({cfg.dim}, T(1), true);
    }
  base_weight_ = delta_kernel<T>(cfg.dim);
  base_bias_ = Tensor<T>({cfg.dim}, true);
}

template <typename T>
Tensor<T> WaveletConv<T>::refine(const Tensor<T>& band, std::size_t level, std::size_t b,
                                 const ForwardContext<T>& ctx) const {
  auto out = ops::channel_scale(ctx.ops().depthwise_conv2d(band, refine_[level][b], 1, 1), scale_[level][b]);
  if (b == kLL || !ctx.training || cfg_.hf_dropout == 0.0) return out;
  if (cfg_.hf_dropout >= 1.0) return ops::scale(out, T(0));
  return ops::dropout(out, cfg_.hf_dropout, true,
                      ctx.stream("wavelet.level" + std::to_string(level + 1) + "." + kBandNames[b]));
}

template <typename T>
Tensor<T> WaveletConv<T>::wavelet_path(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.dim)
    throw DimensionError("wavelet conv expects B×" + std::to_string(cfg_.dim) + "×H×W, got " + shape_str(x.shape()));
  if (max_wavelet_levels(x.dim(2), x.dim(3)) < levels_)
    throw DimensionError("input map " + shape_str(x.shape()) + " cannot hold " + std::to_string(levels_) + " levels");
  const auto& ops = ctx.ops();
  std::vector<Subbands<T>> levels;
  levels.reserve(levels_);
  Tensor<T> ll = x;
  for (std::size_t j = 0; j < levels_; ++j) {
    auto s = dwt_level(ll, bank_, ops);
    for (std::size_t b = 0; b < 4; ++b) s.band[b] = refine(s.band[b], j, b, ctx);
    ll = s.band[kLL];
    levels.push_back(std::move(s));
  }
  Tensor<T> recon;
  for (std::size_t j = levels_; j-- > 0;) {
    if (recon.defined()) levels[j].band[kLL] = recon;
    recon = iwt_level(levels[j], bank_, ops);
  }
  return recon;
}

template <typename T>
Tensor<T> WaveletConv<T>::forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const {
  const auto recon = wavelet_path(x, ctx);
  const auto base = ops::channel_bias(ctx.ops().depthwise_conv2d(x, base_weight_, 1, 1), base_bias_);
  return ops::add(base, recon);
}

template <typename T>
void WaveletConv<T>::collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const {
  for (std::size_t b = 0; b < 4; ++b) out.push_back({prefix + "dec." + kBandNames[b], bank_.dec[b]});
  for (std::size_t b = 0; b < 4; ++b) out.push_back({prefix + "rec." + kBandNames[b], bank_.rec[b]});
  for (std::size_t j = 0; j < levels_; ++j) {
    const std::string level = prefix + "level" + std::to_string(j + 1) + ".";
    for (std::size_t b = 0; b < 4; ++b) out.push_back({level + "refine." + kBandNames[b], refine_[j][b]});
    for (std::size_t b = 0; b < 4; ++b) out.push_back({level + "scale." + kBandNames[b], scale_[j][b]});
  }
  out.push_back({prefix + "base.weight", base_weight_});
  out.push_back({prefix + "base.bias", base_bias_});
}

template class PatchEmbed<float>;
template class PatchEmbed<double>;
template struct WaveletFilterBank<float>;
template struct WaveletFilterBank<double>;
template class WaveletConv<float>;
template class WaveletConv<double>;
template Subbands<float> dwt_level(const Tensor<float>&, const WaveletFilterBank<float>&, const WeightedOps<float>&);
template Subbands<double> dwt_level(const Tensor<double>&, const WaveletFilterBank<double>&,
                                    const WeightedOps<double>&);
template Tensor<float> iwt_level(const Subbands<float>&, const WaveletFilterBank<float>&, const WeightedOps<float>&);
template Tensor<double> iwt_level(const Subbands<double>&, const WaveletFilterBank<double>&,
                                  const WeightedOps<double>&);

}  // namespace waveformer
