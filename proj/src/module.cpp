#include "waveformer/module.hpp"

#include <iostream>

#include "waveformer/ops.hpp"

namespace waveformer {

template <typename T>
Tensor<T> WeightedOps<T>::linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) const {
  return ops::linear(x, w, bias);
}

template <typename T>
Tensor<T> WeightedOps<T>::depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                                           std::size_t pad) const {
  return ops::depthwise_conv2d(x, k, stride, pad);
}

template <typename T>
Tensor<T> WeightedOps<T>::depthwise_conv2d_transposed(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                                                      std::size_t pad, std::size_t out_h, std::size_t out_w) const {
  return ops::depthwise_conv2d_transposed(x, k, stride, pad, out_h, out_w);
}

template <typename T>
const WeightedOps<T>& WeightedOps<T>::reference() {
  static const WeightedOps<T> instance;
  return instance;
}

template class WeightedOps<float>;
template class WeightedOps<double>;

namespace {
WarningSink& sink() {
  static WarningSink s = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  return s;
}
}  // namespace

void set_warning_sink(WarningSink s) {
  sink() = s ? std::move(s) : [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
}

void warn(const std::string& message) { sink()(message); }

}  // namespace waveformer
