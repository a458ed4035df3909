#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "waveformer/module.hpp"
#include "waveformer/tensor.hpp"

namespace waveformer {

struct PatchEmbedConfig {
  std::size_t patch_width = 40;
  std::size_t embed_dim = 256;
  std::size_t window = 200;
  std::size_t channels = 8;

  std::size_t num_patches() const { return (window + patch_width - 1) / patch_width; }
};

// Non-overlapping (1, P) patches projected to D features, then LayerNorm over
// D and GELU. Maps B×C×T to B×D×C×N; T is zero-padded up to N·P.
template <typename T>
class PatchEmbed {
 public:
  PatchEmbed(const PatchEmbedConfig& cfg, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;
  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const;
  const PatchEmbedConfig& config() const { return cfg_; }

 private:
  PatchEmbedConfig cfg_;
  Tensor<T> weight_;  // P × D
  Tensor<T> bias_;
  Tensor<T> norm_gamma_;
  Tensor<T> norm_beta_;
};

enum Band : std::size_t { kLL = 0, kLH = 1, kHL = 2, kHH = 3 };
inline constexpr std::array<const char*, 4> kBandNames{"ll", "lh", "hl", "hh"};

// Zero padding applied before a decomposition level, (top, bottom, left, right).
struct PadRecord {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;
  bool operator==(const PadRecord&) const = default;
};

template <typename T>
struct Subbands {
  std::array<Tensor<T>, 4> band;  // indexed by Band
  PadRecord pad;
  std::size_t height = 0;  // unpadded input size of this level
  std::size_t width = 0;
};

// Analysis and synthesis kernels, each D×2×2 per band. Rows of a kernel run
// along the channel axis and columns along time, so LH is low-pass over
// channels and high-pass over time.
template <typename T>
struct WaveletFilterBank {
  std::array<Tensor<T>, 4> dec;
  std::array<Tensor<T>, 4> rec;

  // Orthonormal Haar: entries ±1/2, synthesis equal to analysis.
  static WaveletFilterBank haar(std::size_t dim, bool requires_grad = true);
};

// One analysis level: odd spatial dims are zero-padded at the bottom/right,
// then each band is a stride-2 depthwise convolution.
template <typename T>
Subbands<T> dwt_level(const Tensor<T>& x, const WaveletFilterBank<T>& bank,
                      const WeightedOps<T>& ops = WeightedOps<T>::reference());

// Stride-2 transposed depthwise convolutions summed over bands, then cropped
// back to (height, width).
template <typename T>
Tensor<T> iwt_level(const Subbands<T>& s, const WaveletFilterBank<T>& bank,
                    const WeightedOps<T>& ops = WeightedOps<T>::reference());

// Largest usable depth for an H×W map: ⌊log2(min(H, W))⌋ + 1.
std::size_t max_wavelet_levels(std::size_t height, std::size_t width);

struct WaveletConfig {
  std::size_t dim = 256;
  std::size_t levels = 3;
  double hf_dropout = 0.1;
  std::size_t height = 8;  // channels C of the patch grid
  std::size_t width = 5;   // patches N
};

// Learnable multi-level wavelet convolution with a residual depthwise path:
// out = Conv_base(x) + X_recon.
template <typename T>
class WaveletConv {
 public:
  // Levels above max_wavelet_levels(height, width) are clamped with a warning.
  // Initialization is deterministic: Haar bank, delta kernels, unit scales.
  explicit WaveletConv(const WaveletConfig& cfg);

  Tensor<T> forward(const Tensor<T>& x, const ForwardContext<T>& ctx) const;
  // Reconstruction branch only (X_recon).
  Tensor<T> wavelet_path(const Tensor<T>& x, const ForwardContext<T>& ctx) const;

  void collect(std::vector<NamedTensor<T>>& out, const std::string& prefix) const;
  std::size_t levels() const { return levels_; }
  const WaveletConfig& config() const { return cfg_; }
  // Test hook; values ≥ 1 zero the high-frequency bands in training mode.
  void set_hf_dropout(double p) { cfg_.hf_dropout = p; }

 private:
  Tensor<T> refine(const Tensor<T>& band, std::size_t level, std::size_t b, const ForwardContext<T>& ctx) const;

  WaveletConfig cfg_;
  std::size_t levels_ = 0;
  WaveletFilterBank<T> bank_;
  std::vector<std::array<Tensor<T>, 4>> refine_;  // per level, D×3×3
  std::vector<std::array<Tensor<T>, 4>> scale_;   // per level, D
  Tensor<T> base_weight_;                          // D×3×3
  Tensor<T> base_bias_;
};

}  // namespace waveformer
