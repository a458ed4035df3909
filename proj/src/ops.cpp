#include "waveformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "waveformer/errors.hpp"
#include "waveformer/kernels.hpp"

namespace waveformer::ops {

using detail::Node;

namespace {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
}

template <typename T>
std::vector<T> copy_of(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    for (const auto* in : {&a, &b})
      if (T* g = grad_target(*in))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (T* g = grad_target(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (T* g = grad_target(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (T* g = grad_target(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * b.data()[i];
    if (T* g = grad_target(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * a.data()[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result<T>(a.shape(), std::move(out), {a}, [a, factor](Node<T>& self) {
    if (T* g = grad_target(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  return make_result<T>({1}, {s}, {a}, [a](Node<T>& self) {
    if (T* g = grad_target(a))
      for (std::size_t i = 0; i < a.numel(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "dot");
  T s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a.data()[i] * b.data()[i];
  return make_result<T>({1}, {s}, {a, b}, [a, b](Node<T>& self) {
    const T g0 = self.grad[0];
    if (T* g = grad_target(a))
      for (std::size_t i = 0; i < a.numel(); ++i) g[i] += g0 * b.data()[i];
    if (T* g = grad_target(b))
      for (std::size_t i = 0; i < b.numel(); ++i) g[i] += g0 * a.data()[i];
  });
}

// -------------------------------------------------------------------- matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return make_result<T>({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node<T>& self) {
    if (T* g = grad_target(a)) kernels::gemm_nt(self.grad.data(), b.data().data(), g, m, n, k);
    if (T* g = grad_target(b)) kernels::gemm_tn(a.data().data(), self.grad.data(), g, k, m, n);
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(w, 2, "linear");
  const std::size_t k = w.dim(0), n = w.dim(1);
  if (x.shape().back() != k)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != n))
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " vs weight " + shape_str(w.shape()));
  const std::size_t m = x.numel() / k;
  std::vector<T> out(m * n, T(0));
  if (bias.defined())
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * n);
  kernels::gemm_nn(x.data().data(), w.data().data(), out.data(), m, k, n);
  Shape shape = x.shape();
  shape.back() = n;
  return make_result<T>(std::move(shape), std::move(out), {x, w, bias}, [x, w, bias, m, k, n](Node<T>& self) {
    const T* gy = self.grad.data();
    if (T* g = grad_target(x)) kernels::gemm_nt(gy, w.data().data(), g, m, n, k);
    if (T* g = grad_target(w)) kernels::gemm_tn(x.data().data(), gy, g, k, m, n);
    if (bias.defined())
      if (T* g = grad_target(bias))
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += gy[i * n + j];
  });
}

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 3, "batched_matmul");
  require_rank(b, 3, "batched_matmul");
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != groups || b.dim(1) != k)
    throw DimensionError("batched_matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(groups * m * n, T(0));
  for (std::size_t g = 0; g < groups; ++g)
    kernels::gemm_nn(a.data().data() + g * m * k, b.data().data() + g * k * n, out.data() + g * m * n, m, k, n);
  return make_result<T>({groups, m, n}, std::move(out), {a, b}, [a, b, groups, m, k, n](Node<T>& self) {
    T* ga = grad_target(a);
    T* gb = grad_target(b);
    for (std::size_t g = 0; g < groups; ++g) {
      const T* gy = self.grad.data() + g * m * n;
      if (ga) kernels::gemm_nt(gy, b.data().data() + g * k * n, ga + g * m * k, m, n, k);
      if (gb) kernels::gemm_tn(a.data().data() + g * m * k, gy, gb + g * k * n, k, m, n);
    }
  });
}

template <typename T>
Tensor<T> batched_matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 3, "batched_matmul_nt");
  require_rank(b, 3, "batched_matmul_nt");
  const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  if (b.dim(0) != groups || b.dim(2) != k)
    throw DimensionError("batched_matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  std::vector<T> out(groups * m * n, T(0));
  for (std::size_t g = 0; g < groups; ++g)
    kernels::gemm_nt(a.data().data() + g * m * k, b.data().data() + g * n * k, out.data() + g * m * n, m, k, n);
  return make_result<T>({groups, m, n}, std::move(out), {a, b}, [a, b, groups, m, k, n](Node<T>& self) {
    T* ga = grad_target(a);
    T* gb = grad_target(b);
    for (std::size_t g = 0; g < groups; ++g) {
      const T* gy = self.grad.data() + g * m * n;
      // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
      if (ga) kernels::gemm_nn(gy, b.data().data() + g * n * k, ga + g * m * k, m, n, k);
      if (gb) kernels::gemm_tn(gy, a.data().data() + g * m * k, gb + g * n * k, n, m, k);
    }
  });
}

// ------------------------------------------------------------------- layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return make_result<T>(std::move(shape), copy_of(x), {x}, [x](Node<T>& self) {
    if (T* g = grad_target(x))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order) {
  const std::size_t rank = x.rank();
  if (order.size() != rank) throw DimensionError("permute: order size differs from rank");
  std::vector<bool> used(rank, false);
  for (std::size_t a : order) {
    if (a >= rank || used[a]) throw DimensionError("permute: invalid axis order");
    used[a] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * x.dim(i + 1);
  Shape out_shape(rank);
  std::vector<std::size_t> src_stride(rank);  // input stride of each output axis
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.dim(order[i]);
    src_stride[i] = in_strides[order[i]];
  }
  // src[i] = input offset of output element i.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    src[i] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      offset += src_stride[ax];
      if (++idx[ax] < out_shape[ax]) break;
      offset -= src_stride[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[src[i]];
  return make_result<T>(std::move(out_shape), std::move(out), {x}, [x, src = std::move(src)](Node<T>& self) {
    if (T* g = grad_target(x))
      for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
  });
}

// ------------------------------------------------------------- convolution

namespace {

struct ConvGeometry {
  std::size_t batch, channels, in_h, in_w, kh, kw, stride, pad, out_h, out_w;
};

// y[b,c,i,j] = Σ_uv k[c,u,v]·x[b,c,i·s+u−p, j·s+v−p]
template <typename T>
void conv_forward(const ConvGeometry& g, const T* x, const T* k, T* y) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.channels; ++c) {
      const T* xc = x + (b * g.channels + c) * g.in_h * g.in_w;
      const T* kc = k + c * g.kh * g.kw;
      T* yc = y + (b * g.channels + c) * g.out_h * g.out_w;
      for (std::size_t i = 0; i < g.out_h; ++i)
        for (std::size_t j = 0; j < g.out_w; ++j) {
          T acc = 0;
          for (std::size_t u = 0; u < g.kh; ++u) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.pad);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t v = 0; v < g.kw; ++v) {
              const std::ptrdiff_t jj =
                  static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.pad);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              acc += kc[u * g.kw + v] * xc[ii * g.in_w + jj];
            }
          }
          yc[i * g.out_w + j] += acc;
        }
    }
}

// x-space += adjoint applied to y-space values.
template <typename T>
void conv_adjoint(const ConvGeometry& g, const T* y, const T* k, T* x) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.channels; ++c) {
      T* xc = x + (b * g.channels + c) * g.in_h * g.in_w;
      const T* kc = k + c * g.kh * g.kw;
      const T* yc = y + (b * g.channels + c) * g.out_h * g.out_w;
      for (std::size_t i = 0; i < g.out_h; ++i)
        for (std::size_t j = 0; j < g.out_w; ++j) {
          const T gy = yc[i * g.out_w + j];
          for (std::size_t u = 0; u < g.kh; ++u) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.pad);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t v = 0; v < g.kw; ++v) {
              const std::ptrdiff_t jj =
                  static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.pad);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              xc[ii * g.in_w + jj] += kc[u * g.kw + v] * gy;
            }
          }
        }
    }
}

// gk[c,u,v] += Σ x[b,c,i·s+u−p, j·s+v−p]·y[b,c,i,j]
template <typename T>
void conv_kernel_grad(const ConvGeometry& g, const T* x, const T* y, T* gk) {
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t c = 0; c < g.channels; ++c) {
      const T* xc = x + (b * g.channels + c) * g.in_h * g.in_w;
      const T* yc = y + (b * g.channels + c) * g.out_h * g.out_w;
      T* gkc = gk + c * g.kh * g.kw;
      for (std::size_t i = 0; i < g.out_h; ++i)
        for (std::size_t j = 0; j < g.out_w; ++j) {
          const T gy = yc[i * g.out_w + j];
          for (std::size_t u = 0; u < g.kh; ++u) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i * g.stride + u) - static_cast<std::ptrdiff_t>(g.pad);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            for (std::size_t v = 0; v < g.kw; ++v) {
              const std::ptrdiff_t jj =
                  static_cast<std::ptrdiff_t>(j * g.stride + v) - static_cast<std::ptrdiff_t>(g.pad);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
              gkc[u * g.kw + v] += xc[ii * g.in_w + jj] * gy;
            }
          }
        }
    }
}

template <typename T>
void check_kernel(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride, const char* op) {
  require_rank(x, 4, op);
  require_rank(k, 3, op);
  if (k.dim(0) != x.dim(1))
    throw DimensionError(std::string(op) + ": kernel " + shape_str(k.shape()) + " vs input " + shape_str(x.shape()));
  if (stride == 0) throw ParameterError(std::string(op) + ": stride must be positive");
}

}  // namespace

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride, std::size_t pad) {
  check_kernel(x, k, stride, "depthwise_conv2d");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(1), k.dim(2), stride, pad, 0, 0};
  if (g.in_h + 2 * pad < g.kh || g.in_w + 2 * pad < g.kw)
    throw DimensionError("depthwise_conv2d: kernel " + shape_str(k.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  g.out_h = (g.in_h + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.in_w + 2 * pad - g.kw) / stride + 1;
  std::vector<T> out(g.batch * g.channels * g.out_h * g.out_w, T(0));
  conv_forward(g, x.data().data(), k.data().data(), out.data());
  return make_result<T>({g.batch, g.channels, g.out_h, g.out_w}, std::move(out), {x, k}, [x, k, g](Node<T>& self) {
    if (T* gx = grad_target(x)) conv_adjoint(g, self.grad.data(), k.data().data(), gx);
    if (T* gk = grad_target(k)) conv_kernel_grad(g, x.data().data(), self.grad.data(), gk);
  });
}

template <typename T>
Tensor<T> depthwise_conv2d_transposed(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride, std::size_t pad,
                                      std::size_t out_h, std::size_t out_w) {
  check_kernel(x, k, stride, "depthwise_conv2d_transposed");
  // The geometry is that of the forward conv mapping the (larger) output space
  // onto x; the transposed op is its adjoint.
  ConvGeometry g{x.dim(0), x.dim(1), 0, 0, k.dim(1), k.dim(2), stride, pad, x.dim(2), x.dim(3)};
  const auto minimal = [&](std::size_t n, std::size_t kn) -> std::size_t {
    const std::ptrdiff_t v = static_cast<std::ptrdiff_t>((n - 1) * stride + kn) - static_cast<std::ptrdiff_t>(2 * pad);
    if (v <= 0)
      throw DimensionError("depthwise_conv2d_transposed: kernel " + shape_str(k.shape()) +
                           " too small for padding " + std::to_string(pad));
    return static_cast<std::size_t>(v);
  };
  g.in_h = out_h ? out_h : minimal(g.out_h, g.kh);
  g.in_w = out_w ? out_w : minimal(g.out_w, g.kw);
  if (g.in_h + 2 * pad < g.kh || g.in_w + 2 * pad < g.kw || (g.in_h + 2 * pad - g.kh) / stride + 1 != g.out_h ||
      (g.in_w + 2 * pad - g.kw) / stride + 1 != g.out_w)
    throw DimensionError("depthwise_conv2d_transposed: output size " + std::to_string(g.in_h) + "x" +
                         std::to_string(g.in_w) + " incompatible with input " + shape_str(x.shape()));
  std::vector<T> out(g.batch * g.channels * g.in_h * g.in_w, T(0));
  conv_adjoint(g, x.data().data(), k.data().data(), out.data());
  return make_result<T>({g.batch, g.channels, g.in_h, g.in_w}, std::move(out), {x, k}, [x, k, g](Node<T>& self) {
    if (T* gx = grad_target(x)) conv_forward(g, self.grad.data(), k.data().data(), gx);
    if (T* gk = grad_target(k)) conv_kernel_grad(g, self.grad.data(), x.data().data(), gk);
  });
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right) {
  require_rank(x, 4, "pad2d");
  if (top + bottom + left + right == 0) return x;
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h + top + bottom, ow = w + left + right;
  std::vector<T> out(planes * oh * ow, T(0));
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < h; ++i)
      std::copy_n(x.data().data() + (p * h + i) * w, w, out.data() + (p * oh + i + top) * ow + left);
  return make_result<T>({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                        [x, planes, h, w, oh, ow, top, left](Node<T>& self) {
                          if (T* g = grad_target(x))
                            for (std::size_t p = 0; p < planes; ++p)
                              for (std::size_t i = 0; i < h; ++i)
                                for (std::size_t j = 0; j < w; ++j)
                                  g[(p * h + i) * w + j] += self.grad[(p * oh + i + top) * ow + left + j];
                        });
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  require_rank(x, 4, "crop2d");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (top + height > h || left + width > w)
    throw DimensionError("crop2d: window exceeds input " + shape_str(x.shape()));
  if (height == h && width == w) return x;
  std::vector<T> out(planes * height * width);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < height; ++i)
      std::copy_n(x.data().data() + (p * h + i + top) * w + left, width, out.data() + (p * height + i) * width);
  return make_result<T>({x.dim(0), x.dim(1), height, width}, std::move(out), {x},
                        [x, planes, h, w, height, width, top, left](Node<T>& self) {
                          if (T* g = grad_target(x))
                            for (std::size_t p = 0; p < planes; ++p)
                              for (std::size_t i = 0; i < height; ++i)
                                for (std::size_t j = 0; j < width; ++j)
                                  g[(p * h + i + top) * w + left + j] += self.grad[(p * height + i) * width + j];
                        });
}

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& s) {
  require_rank(x, 4, "channel_scale");
  if (s.rank() != 1 || s.dim(0) != x.dim(1))
    throw DimensionError("channel_scale: scale " + shape_str(s.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t o = (b * ch + c) * plane + i;
        out[o] = x.data()[o] * s.data()[c];
      }
  return make_result<T>(x.shape(), std::move(out), {x, s}, [x, s, batch, ch, plane](Node<T>& self) {
    T* gx = grad_target(x);
    T* gs = grad_target(s);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t o = (b * ch + c) * plane + i;
          if (gx) gx[o] += self.grad[o] * s.data()[c];
          if (gs) gs[c] += self.grad[o] * x.data()[o];
        }
  });
}

template <typename T>
Tensor<T> channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  require_rank(x, 4, "channel_bias");
  if (bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw DimensionError("channel_bias: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t o = (b * ch + c) * plane + i;
        out[o] = x.data()[o] + bias.data()[c];
      }
  return make_result<T>(x.shape(), std::move(out), {x, bias}, [x, bias, batch, ch, plane](Node<T>& self) {
    T* gx = grad_target(x);
    T* gb = grad_target(bias);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t o = (b * ch + c) * plane + i;
          if (gx) gx[o] += self.grad[o];
          if (gb) gb[c] += self.grad[o];
        }
  });
}

// ------------------------------------------------------------ normalization

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (!(eps > T(0))) throw ParameterError("layer_norm: eps must be positive");
  const std::size_t n = x.shape().back();
  if (gamma.rank() != 1 || gamma.dim(0) != n || beta.rank() != 1 || beta.dim(0) != n)
    throw DimensionError("layer_norm: affine params must have size " + std::to_string(n));
  const std::size_t rows = x.numel() / n;
  std::vector<T> out(x.numel()), xhat(x.numel()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    T mu = 0;
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= static_cast<T>(n);
    // Second pass refines the mean; a constant row then centers to exact zeros.
    T corr = 0;
    for (std::size_t i = 0; i < n; ++i) corr += xr[i] - mu;
    mu += corr / static_cast<T>(n);
    T var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t i = 0; i < n; ++i) {
      const T h = (xr[i] - mu) * rs;
      xhat[r * n + i] = h;
      out[r * n + i] = h * gamma.data()[i] + beta.data()[i];
    }
  }
  return make_result<T>(x.shape(), std::move(out), {x, gamma, beta},
                        [x, gamma, beta, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                          T* gx = grad_target(x);
                          T* gg = grad_target(gamma);
                          T* gb = grad_target(beta);
                          std::vector<T> dh(n);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gy = self.grad.data() + r * n;
                            const T* h = xhat.data() + r * n;
                            T s1 = 0, s2 = 0;
                            for (std::size_t i = 0; i < n; ++i) {
                              dh[i] = gy[i] * gamma.data()[i];
                              s1 += dh[i];
                              s2 += dh[i] * h[i];
                              if (gg) gg[i] += gy[i] * h[i];
                              if (gb) gb[i] += gy[i];
                            }
                            if (gx) {
                              const T inv_n = T(1) / static_cast<T>(n);
                              for (std::size_t i = 0; i < n; ++i)
                                gx[r * n + i] += rstd[r] * (dh[i] - inv_n * s1 - h[i] * inv_n * s2);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, inv_sqrt2](Node<T>& self) {
    if (T* g = grad_target(x)) {
      const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T v = x.data()[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        g[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  const std::size_t len = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t outer = x.numel() / (len * inner);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = x.data()[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x.data()[base + i * inner]);
      T z = 0;
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(x.data()[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < len; ++i) out[base + i * inner] /= z;
    }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, len, inner, outer](Node<T>& self) {
    T* g = grad_target(x);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T s = 0;
        for (std::size_t i = 0; i < len; ++i) s += self.grad[base + i * inner] * self.data[base + i * inner];
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t p = base + i * inner;
          g[p] += self.data[p] * (self.grad[p] - s);
        }
      }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
  std::vector<T> probs(logits.numel());
  T loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
      throw InputError("cross_entropy: label " + std::to_string(labels[b]) + " outside [0, " +
                       std::to_string(classes) + ")");
    const T* row = logits.data().data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const T log_z = std::log(z) + mx;
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - log_z);
    loss += log_z - row[labels[b]];
  }
  loss /= static_cast<T>(batch);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_result<T>({1}, {loss}, {logits},
                        [logits, batch, classes, probs = std::move(probs), lab = std::move(lab)](Node<T>& self) {
                          T* g = grad_target(logits);
                          if (!g) return;
                          const T s = self.grad[0] / static_cast<T>(batch);
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t c = 0; c < classes; ++c) {
                              const T target = static_cast<int>(c) == lab[b] ? T(1) : T(0);
                              g[b * classes + c] += s * (probs[b * classes + c] - target);
                            }
                        });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, const CounterStream& stream) {
  if (!(p >= 0.0) || p >= 1.0) throw ParameterError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = stream.uniform(i) >= p ? keep_scale : T(0);
    out[i] = x.data()[i] * mask[i];
  }
  return make_result<T>(x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](Node<T>& self) {
    if (T* g = grad_target(x))
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
  });
}

// -------------------------------------------------------------- sequences

template <typename T>
Tensor<T> rotate_pairs(const Tensor<T>& x, const RotaryAngles& angles) {
  require_rank(x, 3, "rotate_pairs");
  const std::size_t groups = x.dim(0), seq = x.dim(1), width = x.dim(2);
  if (width % 2 != 0) throw ConfigError("rotate_pairs: last axis must be even, got " + std::to_string(width));
  if (width / 2 != angles.pairs || seq > angles.positions)
    throw DimensionError("rotate_pairs: angle table " + std::to_string(angles.positions) + "x" +
                         std::to_string(angles.pairs) + " does not cover " + shape_str(x.shape()));
  const std::size_t pairs = angles.pairs;
  std::vector<T> out(x.numel());
  const auto rotate = [angles, groups, seq, pairs](const T* in, T* dst, T sign) {
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t s = 0; s < seq; ++s) {
        const T* v = in + (g * seq + s) * 2 * pairs;
        T* o = dst + (g * seq + s) * 2 * pairs;
        for (std::size_t i = 0; i < pairs; ++i) {
          const T c = static_cast<T>(angles.cos[s * pairs + i]);
          const T sn = sign * static_cast<T>(angles.sin[s * pairs + i]);
          const T a = v[2 * i], b = v[2 * i + 1];
          o[2 * i] += a * c - b * sn;
          o[2 * i + 1] += a * sn + b * c;
        }
      }
  };
  rotate(x.data().data(), out.data(), T(1));
  return make_result<T>(x.shape(), std::move(out), {x}, [x, rotate](Node<T>& self) {
    if (T* g = grad_target(x)) rotate(self.grad.data(), g, T(-1));
  });
}

template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  require_rank(x, 3, "prepend_token");
  const std::size_t batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
  if (token.numel() != d)
    throw DimensionError("prepend_token: token " + shape_str(token.shape()) + " vs width " + std::to_string(d));
  std::vector<T> out(batch * (seq + 1) * d);
  for (std::size_t b = 0; b < batch; ++b) {
    T* ob = out.data() + b * (seq + 1) * d;
    std::copy(token.data().begin(), token.data().end(), ob);
    std::copy_n(x.data().data() + b * seq * d, seq * d, ob + d);
  }
  return make_result<T>({batch, seq + 1, d}, std::move(out), {x, token}, [x, token, batch, seq, d](Node<T>& self) {
    T* gx = grad_target(x);
    T* gt = grad_target(token);
    for (std::size_t b = 0; b < batch; ++b) {
      const T* gb = self.grad.data() + b * (seq + 1) * d;
      if (gt)
        for (std::size_t i = 0; i < d; ++i) gt[i] += gb[i];
      if (gx)
        for (std::size_t i = 0; i < seq * d; ++i) gx[b * seq * d + i] += gb[d + i];
    }
  });
}

template <typename T>
Tensor<T> select_token(const Tensor<T>& x, std::size_t index) {
  require_rank(x, 3, "select_token");
  const std::size_t batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
  if (index >= seq) throw DimensionError("select_token: index out of range");
  std::vector<T> out(batch * d);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(x.data().data() + (b * seq + index) * d, d, out.data() + b * d);
  return make_result<T>({batch, d}, std::move(out), {x}, [x, batch, seq, d, index](Node<T>& self) {
    if (T* g = grad_target(x))
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < d; ++i) g[(b * seq + index) * d + i] += self.grad[b * d + i];
  });
}

template <typename T>
Tensor<T> scale_samples(const Tensor<T>& x, std::span<const T> factors) {
  const std::size_t batch = x.dim(0);
  if (factors.size() != batch) throw DimensionError("scale_samples: one factor per sample required");
  const std::size_t per = x.numel() / batch;
  std::vector<T> f(factors.begin(), factors.end());
  std::vector<T> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = x.data()[b * per + i] * f[b];
  return make_result<T>(x.shape(), std::move(out), {x}, [x, per, f = std::move(f)](Node<T>& self) {
    if (T* g = grad_target(x))
      for (std::size_t b = 0; b < f.size(); ++b)
        for (std::size_t i = 0; i < per; ++i) g[b * per + i] += self.grad[b * per + i] * f[b];
  });
}

#define WAVEFORMER_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                                              \
  template Tensor<T> sum(const Tensor<T>&);                                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                                  \
  template Tensor<T> dot(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> batched_matmul_nt(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                        \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                              \
  template Tensor<T> depthwise_conv2d(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> depthwise_conv2d_transposed(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, \
                                                 std::size_t, std::size_t);                                   \
  template Tensor<T> pad2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);             \
  template Tensor<T> crop2d(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);            \
  template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> channel_bias(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                     \
  template Tensor<T> gelu(const Tensor<T>&);                                                                  \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                                  \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                                   \
  template Tensor<T> dropout(const Tensor<T>&, double, bool, const CounterStream&);                           \
  template Tensor<T> rotate_pairs(const Tensor<T>&, const RotaryAngles&);                                     \
  template Tensor<T> prepend_token(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> select_token(const Tensor<T>&, std::size_t);                                             \
  template Tensor<T> scale_samples(const Tensor<T>&, std::span<const T>);

WAVEFORMER_INSTANTIATE_OPS(float)
WAVEFORMER_INSTANTIATE_OPS(double)

}  // namespace waveformer::ops
