#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "waveformer/kernels.hpp"
#include "waveformer/module.hpp"

namespace waveformer {

inline constexpr float kMinQuantScale = 1e-12f;

// Symmetric per-tensor int8 weights: w ≈ scale·q with q in [−127, 127].
struct QuantizedTensor {
  Shape shape;
  std::vector<std::int8_t> values;
  float scale = kMinQuantScale;
  int zero_point = 0;

  std::vector<float> dequantize() const;
};

// scale = max|w|/127 (clamped to kMinQuantScale), rounding half away from zero.
QuantizedTensor quantize_symmetric(std::span<const float> w, Shape shape);

// Asymmetric uint8 activation parameters from the tensor's own range, widened
// to include 0 so zero padding stays exact.
struct ActivationQuant {
  float scale = 1.0f;
  int zero_point = 0;
};
ActivationQuant activation_params(std::span<const float> x);
std::uint8_t quantize_activation(float x, const ActivationQuant& q);

// Weights of rank ≥ 2 (matmul and convolution kernels) are quantized; biases,
// norms, scales and the class token stay fp32.
inline bool is_quantizable(const Shape& shape) { return shape.size() >= 2; }

// Post-training INT8 execution of every quantized weight. Activations are
// quantized per tensor at each op boundary, products accumulate exactly in
// int32 and the result is rescaled to fp32. Weights it does not know fall back
// to the reference ops. Inference only: results carry no graph.
class Int8Backend : public WeightedOps<float> {
 public:
  explicit Int8Backend(std::span<const NamedTensor<float>> params);

  Tensor<float> linear(const Tensor<float>& x, const Tensor<float>& w, const Tensor<float>& bias) const override;
  Tensor<float> depthwise_conv2d(const Tensor<float>& x, const Tensor<float>& k, std::size_t stride,
                                 std::size_t pad) const override;
  Tensor<float> depthwise_conv2d_transposed(const Tensor<float>& x, const Tensor<float>& k, std::size_t stride,
                                            std::size_t pad, std::size_t out_h, std::size_t out_w) const override;

  struct Entry {
    std::string name;
    QuantizedTensor weight;
    kernels::PackedInt8 packed;        // rank-2 weights
    std::vector<float> integer_kernel;  // conv kernels, q as exact floats
  };
  const std::vector<Entry>& entries() const { return entries_; }
  const Entry* find(const Tensor<float>& w) const;
  // Bytes of int8 payload plus scales.
  std::size_t weight_bytes() const;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<const void*, std::size_t> index_;
};

}  // namespace waveformer
