#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "waveformer/rng.hpp"
#include "waveformer/tensor.hpp"

namespace waveformer {

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Every weight-bearing op of the model goes through this interface so an
// alternative backend (e.g. INT8) can substitute its own kernels while the rest
// of the forward pass stays shared. The base class runs the plain ops.
template <typename T>
class WeightedOps {
 public:
  virtual ~WeightedOps() = default;
  virtual Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) const;
  virtual Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                                     std::size_t pad) const;
  virtual Tensor<T> depthwise_conv2d_transposed(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                                                std::size_t pad, std::size_t out_h, std::size_t out_w) const;

  static const WeightedOps& reference();
};

template <typename T>
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  const WeightedOps<T>* backend = nullptr;  // nullptr: reference ops

  const WeightedOps<T>& ops() const { return backend ? *backend : WeightedOps<T>::reference(); }
  CounterStream stream(std::string_view name) const { return CounterStream(seed, name, step); }
};

// Warnings go through a replaceable sink (stderr by default) so tests can
// capture them.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

// Trainable tensor drawn from U(−bound, bound).
template <typename T>
Tensor<T> uniform_parameter(Rng& rng, Shape shape, double bound) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

}  // namespace waveformer
