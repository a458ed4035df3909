#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "waveformer/rng.hpp"
#include "waveformer/tensor.hpp"

// Differentiable primitives. Every op validates shapes explicitly; there is no
// implicit broadcasting beyond what each op documents.
namespace waveformer::ops {

// Same-shape elementwise arithmetic.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
template <typename T> Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b);

// [M×K]·[K×N]. dA = dC·Bᵀ, dB = Aᵀ·dC.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[..., K]·w[K×N] + bias[N]; leading dims are flattened. bias may be undefined.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

// [G×M×K]·[G×K×N] -> [G×M×N].
template <typename T> Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b);
// [G×M×K]·[G×N×K]ᵀ -> [G×M×N].
template <typename T> Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);

// Cross-correlation of each channel with its own kernel.
// x [B×C×H×W], k [C×kh×kw], symmetric zero padding `pad` on both spatial axes.
// Output spatial size floor((H + 2·pad − kh)/stride) + 1.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride, std::size_t pad);

// Adjoint of depthwise_conv2d with the same (k, stride, pad). out_h/out_w pick
// the output size when several sizes map onto the input's; 0 means the
// minimal size (H − 1)·stride − 2·pad + kh.
template <typename T>
Tensor<T> depthwise_conv2d_transposed(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                                      std::size_t pad, std::size_t out_h = 0, std::size_t out_w = 0);

// Zero padding / cropping of the last two axes of a rank-4 tensor.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right);
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

// x [B×C×H×W] scaled / shifted per channel by s[C].
template <typename T> Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s);
template <typename T> Tensor<T> channel_bias(const Tensor<T>& x, const Tensor<T>& b);

// Normalizes over the last axis, then applies gamma/beta (each of that size).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

// Exact erf formulation.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Mean cross-entropy of logits [B×K] against integer labels.
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Inverted dropout. Identity when !training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, const CounterStream& stream);

// Rotations applied to consecutive dimension pairs (2i, 2i+1) of the last
// axis. cos/sin are [positions × pairs]; row m rotates sequence index m.
struct RotaryAngles {
  std::size_t positions = 0;
  std::size_t pairs = 0;
  std::vector<double> cos;
  std::vector<double> sin;
};

// x [G×S×2P] with S ≤ angles.positions, P == angles.pairs.
template <typename T> Tensor<T> rotate_pairs(const Tensor<T>& x, const RotaryAngles& angles);

// x [B×S×D], token [D] -> [B×(S+1)×D] with the token at index 0.
template <typename T> Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token);
// x [B×S×D] -> [B×D] at sequence index `index`.
template <typename T> Tensor<T> select_token(const Tensor<T>& x, std::size_t index);
// Multiplies sample b of x [B×...] by the constant factors[b].
template <typename T> Tensor<T> scale_samples(const Tensor<T>& x, std::span<const T> factors);

}  // namespace waveformer::ops
