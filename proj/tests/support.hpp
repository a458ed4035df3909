#pragma once

// Test-only helpers: random tensors and a central finite-difference oracle that
// never touches the autodiff path it is checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "waveformer/model.hpp"
#include "waveformer/rng.hpp"
#include "waveformer/tensor.hpp"

namespace wf_test {

using waveformer::Rng;
using waveformer::Shape;
using waveformer::Tensor;

template <typename T = double>
Tensor<T> random_tensor(Rng& rng, Shape shape, bool requires_grad = false, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(waveformer::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

inline double norm2(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

struct GradCheck {
  std::string name;
  double rel_error = 0;
};

// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor) per leaf.
inline std::vector<GradCheck> check_gradients(std::vector<std::pair<std::string, Tensor<double>>> leaves,
                                              const std::function<Tensor<double>()>& loss_fn, double step = 1e-5,
                                              double floor = 1e-12) {
  for (auto& [_, t] : leaves) t.zero_grad();
  loss_fn().backward();
  std::vector<GradCheck> out;
  for (auto& [name, t] : leaves) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    auto data = t.mutable_data();
    waveformer::NoGradGuard no_grad;
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double orig = data[i];
      data[i] = orig + step;
      const double fp = loss_fn().item();
      data[i] = orig - step;
      const double fm = loss_fn().item();
      data[i] = orig;
      numeric[i] = (fp - fm) / (2 * step);
    }
    std::vector<double> diff(t.numel());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double denom = std::max({norm2(analytic), norm2(numeric), floor});
    out.push_back({name, norm2(diff) / denom});
  }
  return out;
}

inline double max_rel_error(const std::vector<GradCheck>& checks) {
  double m = 0;
  for (const auto& c : checks) m = std::max(m, c.rel_error);
  return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

template <typename T>
double inner(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a.data()[i]) * static_cast<double>(b.data()[i]);
  return s;
}

// Closed-form parameter count, written from the architecture description
// rather than by walking the model.
inline std::size_t expected_parameters(const waveformer::ModelConfig& c) {
  const std::size_t D = c.embed_dim, F = c.ffn_dim, P = c.patch_width, K = c.num_classes;
  const std::size_t N = (c.window + P - 1) / P;
  std::size_t reachable = 1, side = std::min(c.channels, N);
  while (side >= 2) {
    side /= 2;
    ++reachable;
  }
  const std::size_t J = std::min(c.wavelet_levels, reachable);
  std::size_t total = P * D + D + 2 * D;
  if (c.use_waveletconv) total += 2 * 4 * 4 * D + J * 4 * (9 * D + D) + 9 * D + D;
  total += D + c.layers * (2 * D + 4 * (D * D + D) + 2 * D + D * F + F + F * D + D) + 2 * D;
  return total + D * K + K;
}

}  // namespace wf_test
