#include "waveformer/quant.hpp"

#include <algorithm>
#include <cmath>

#include "waveformer/errors.hpp"
#include "waveformer/ops.hpp"

namespace waveformer {

std::vector<float> QuantizedTensor::dequantize() const {
  std::vector<float> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = scale * static_cast<float>(values[i] - zero_point);
  return out;
}

QuantizedTensor quantize_symmetric(std::span<const float> w, Shape shape) {
  if (shape_numel(shape) != w.size()) throw DimensionError("quantize_symmetric: shape does not match payload");
  QuantizedTensor q;
  q.shape = std::move(shape);
  float max_abs = 0;
  for (float v : w) max_abs = std::max(max_abs, std::abs(v));
  if (!std::isfinite(max_abs)) throw InputError("quantize_symmetric: non-finite weight");
  q.scale = std::max(max_abs / 127.0f, kMinQuantScale);
  q.values.resize(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const float r = std::round(w[i] / q.scale);  // half away from zero
    q.values[i] = static_cast<std::int8_t>(std::clamp(r, -127.0f, 127.0f));
  }
  return q;
}

ActivationQuant activation_params(std::span<const float> x) {
  float lo = 0, hi = 0;
  for (float v : x) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  ActivationQuant q;
  if (hi > lo) {
    q.scale = (hi - lo) / 255.0f;
    q.zero_point = static_cast<int>(std::clamp(std::round(-lo / q.scale), 0.0f, 255.0f));
  }
  return q;
}

std::uint8_t quantize_activation(float x, const ActivationQuant& q) {
  const float r = std::round(x / q.scale) + static_cast<float>(q.zero_point);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0f, 255.0f));
}

namespace {

// Largest tap count for which Σ (u8 − zp)·s8 stays exact in float.
constexpr std::size_t kMaxExactTaps = 512;

// x rewritten as integer-valued floats (q − zp), the exact operand of an
// integer convolution.
Tensor<float> centered_activation(const Tensor<float>& x, ActivationQuant& q) {
  q = activation_params(x.data());
  std::vector<float> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<float>(static_cast<int>(quantize_activation(x.data()[i], q)) - q.zero_point);
  return Tensor<float>(x.shape(), std::move(v));
}

Tensor<float> rescaled(const Tensor<float>& acc, float factor) {
  std::vector<float> v(acc.data().begin(), acc.data().end());
  for (float& e : v) e *= factor;
  return Tensor<float>(acc.shape(), std::move(v));
}

}  // namespace

Int8Backend::Int8Backend(std::span<const NamedTensor<float>> params) {
  for (const auto& p : params) {
    if (!is_quantizable(p.tensor.shape())) continue;
    Entry e;
    e.name = p.name;
    e.weight = quantize_symmetric(p.tensor.data(), p.tensor.shape());
    if (p.tensor.rank() == 2) {
      e.packed = kernels::pack_int8(e.weight.values.data(), p.tensor.dim(0), p.tensor.dim(1));
    } else {
      if (p.tensor.numel() / p.tensor.dim(0) > kMaxExactTaps)
        throw ParameterError("Int8Backend: kernel '" + p.name + "' has too many taps for exact accumulation");
      e.integer_kernel.assign(e.weight.values.begin(), e.weight.values.end());
    }
    index_.emplace(p.tensor.node().get(), entries_.size());
    entries_.push_back(std::move(e));
  }
}

const Int8Backend::Entry* Int8Backend::find(const Tensor<float>& w) const {
  const auto it = index_.find(w.node().get());
  return it == index_.end() ? nullptr : &entries_[it->second];
}

std::size_t Int8Backend::weight_bytes() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.weight.values.size() + sizeof(float);
  return n;
}

Tensor<float> Int8Backend::linear(const Tensor<float>& x, const Tensor<float>& w, const Tensor<float>& bias) const {
  const Entry* e = find(w);
  if (!e || e->packed.k == 0) return WeightedOps<float>::linear(x, w, bias);
  const auto& pk = e->packed;
  if (x.shape().back() != pk.k) throw DimensionError("Int8Backend::linear: input width does not match weight");
  const std::size_t m = x.numel() / pk.k;
  const auto aq = activation_params(x.data());
  std::vector<std::uint8_t> a(m * pk.k_pad, 0);
  const float* xs = x.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < pk.k; ++j) a[i * pk.k_pad + j] = quantize_activation(xs[i * pk.k + j], aq);
  std::vector<std::int32_t> acc(m * pk.n);
  kernels::gemm_u8s8(a.data(), pk, acc.data(), m);

  const float factor = aq.scale * e->weight.scale;
  std::vector<float> out(m * pk.n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < pk.n; ++j) {
      const std::int32_t centered = acc[i * pk.n + j] - aq.zero_point * pk.col_sums[j];
      out[i * pk.n + j] = static_cast<float>(centered) * factor + (bias.defined() ? bias.data()[j] : 0.0f);
    }
  Shape shape = x.shape();
  shape.back() = pk.n;
  return Tensor<float>(std::move(shape), std::move(out));
}

Tensor<float> Int8Backend::depthwise_conv2d(const Tensor<float>& x, const Tensor<float>& k, std::size_t stride,
                                            std::size_t pad) const {
  const Entry* e = find(k);
  if (!e || e->integer_kernel.empty()) return WeightedOps<float>::depthwise_conv2d(x, k, stride, pad);
  ActivationQuant aq;
  const auto xi = centered_activation(x, aq);
  const Tensor<float> ki(k.shape(), e->integer_kernel);
  return rescaled(ops::depthwise_conv2d(xi, ki, stride, pad), aq.scale * e->weight.scale);
}

Tensor<float> Int8Backend::depthwise_conv2d_transposed(const Tensor<float>& x, const Tensor<float>& k,
                                                       std::size_t stride, std::size_t pad, std::size_t out_h,
                                                       std::size_t out_w) const {
  const Entry* e = find(k);
  if (!e || e->integer_kernel.empty())
    return WeightedOps<float>::depthwise_conv2d_transposed(x, k, stride, pad, out_h, out_w);
  ActivationQuant aq;
  const auto xi = centered_activation(x, aq);
  const Tensor<float> ki(k.shape(), e->integer_kernel);
  return rescaled(ops::depthwise_conv2d_transposed(xi, ki, stride, pad, out_h, out_w), aq.scale * e->weight.scale);
}

}  // namespace waveformer
