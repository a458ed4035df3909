#include "waveformer/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <thread>

#if defined(__AVX512F__) && defined(__AVX512VNNI__)
#include <immintrin.h>
#define WAVEFORMER_VNNI 1
#endif

namespace waveformer::kernels {

namespace {

std::size_t g_threads = 1;

// Splits [0, rows) into contiguous chunks aligned to `grain` and runs fn(begin, end).
template <typename Fn>
void parallel_rows(std::size_t rows, std::size_t grain, std::size_t work, Fn&& fn) {
  const std::size_t threads = std::min(g_threads, (rows + grain - 1) / grain);
  if (threads <= 1 || work < (1u << 16)) {
    fn(std::size_t{0}, rows);
    return;
  }
  const std::size_t blocks = (rows + grain - 1) / grain;
  const std::size_t per = (blocks + threads - 1) / threads;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = std::min(rows, t * per * grain);
    const std::size_t e = std::min(rows, (t + 1) * per * grain);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

constexpr std::size_t kColTile = 512;

template <typename T>
void gemm_nn_rows(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t r0, std::size_t r1,
                  std::size_t k, std::size_t n) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
    const std::size_t jn = std::min(n, j0 + kColTile) - j0;
    std::size_t i = r0;
    for (; i + 4 <= r1; i += 4) {
      T* __restrict c0 = c + i * n + j0;
      T* __restrict c1 = c0 + n;
      T* __restrict c2 = c1 + n;
      T* __restrict c3 = c2 + n;
      const T* a0 = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
        const T* __restrict bp = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) {
          const T bj = bp[j];
          c0[j] += v0 * bj;
          c1[j] += v1 * bj;
          c2[j] += v2 * bj;
          c3[j] += v3 * bj;
        }
      }
    }
    for (; i < r1; ++i) {
      T* __restrict ci = c + i * n + j0;
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T v = ai[p];
        const T* __restrict bp = b + p * n + j0;
        for (std::size_t j = 0; j < jn; ++j) ci[j] += v * bp[j];
      }
    }
  }
}

}  // namespace

void set_num_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }
std::size_t num_threads() { return g_threads; }

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  parallel_rows(m, 4, m * k * n, [&](std::size_t r0, std::size_t r1) { gemm_nn_rows(a, b, c, r0, r1, k, n); });
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  // Each output row i only reads column i of A, so rows parallelize cleanly.
  parallel_rows(m, 4, m * k * n, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t p = 0; p < k; ++p) {
      const T* __restrict bp = b + p * n;
      const T* ap = a + p * m;
      for (std::size_t i = r0; i < r1; ++i) {
        const T v = ap[i];
        if (v == T(0)) continue;
        T* __restrict ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += v * bp[j];
      }
    }
  });
}

template void gemm_nn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_nn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void gemm_nt<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_nt<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);
template void gemm_tn<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm_tn<double>(const double*, const double*, double*, std::size_t, std::size_t, std::size_t);

PackedInt8 pack_int8(const std::int8_t* w, std::size_t k, std::size_t n) {
  PackedInt8 p;
  p.k = k;
  p.n = n;
  p.k_pad = (k + 3) / 4 * 4;
  p.n_pad = (n + 15) / 16 * 16;
  p.data.assign(p.k_pad * p.n_pad, 0);
  p.col_sums.assign(n, 0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      const std::int8_t v = w[r * n + j];
      p.data[((r / 4) * p.n_pad + j) * 4 + r % 4] = v;
      p.col_sums[j] += v;
    }
  return p;
}

bool has_vnni() {
#ifdef WAVEFORMER_VNNI
  return true;
#else
  return false;
#endif
}

void gemm_u8s8(const std::uint8_t* a, const PackedInt8& w, std::int32_t* c, std::size_t m) {
  const std::size_t kq = w.k_pad / 4;
  const std::size_t n = w.n;
#ifdef WAVEFORMER_VNNI
  parallel_rows(m, 4, m * w.k_pad * n, [&](std::size_t r0, std::size_t r1) {
    std::int32_t tail[16];
    for (std::size_t i = r0; i < r1; i += 4) {
      const std::size_t rows = std::min<std::size_t>(4, r1 - i);
      const std::uint8_t* ar[4];
      for (std::size_t r = 0; r < 4; ++r) ar[r] = a + (i + std::min(r, rows - 1)) * w.k_pad;
      for (std::size_t j = 0; j < w.n_pad; j += 16) {
        __m512i acc0 = _mm512_setzero_si512(), acc1 = acc0, acc2 = acc0, acc3 = acc0;
        const std::int8_t* wp = w.data.data() + j * 4;
        for (std::size_t q = 0; q < kq; ++q) {
          const __m512i wv = _mm512_loadu_si512(wp + q * w.n_pad * 4);
          std::int32_t x0, x1, x2, x3;
          std::memcpy(&x0, ar[0] + 4 * q, 4);
          std::memcpy(&x1, ar[1] + 4 * q, 4);
          std::memcpy(&x2, ar[2] + 4 * q, 4);
          std::memcpy(&x3, ar[3] + 4 * q, 4);
          acc0 = _mm512_dpbusd_epi32(acc0, _mm512_set1_epi32(x0), wv);
          acc1 = _mm512_dpbusd_epi32(acc1, _mm512_set1_epi32(x1), wv);
          acc2 = _mm512_dpbusd_epi32(acc2, _mm512_set1_epi32(x2), wv);
          acc3 = _mm512_dpbusd_epi32(acc3, _mm512_set1_epi32(x3), wv);
        }
        const __m512i accs[4] = {acc0, acc1, acc2, acc3};
        const std::size_t cols = std::min<std::size_t>(16, n - std::min(n, j));
        for (std::size_t r = 0; r < rows; ++r) {
          if (cols == 16) {
            _mm512_storeu_si512(c + (i + r) * n + j, accs[r]);
          } else if (cols > 0) {
            _mm512_storeu_si512(tail, accs[r]);
            std::memcpy(c + (i + r) * n + j, tail, cols * sizeof(std::int32_t));
          }
        }
      }
    }
  });
#else
  for (std::size_t i = 0; i < m; ++i) {
    const std::uint8_t* ai = a + i * w.k_pad;
    std::int32_t* ci = c + i * n;
    std::fill(ci, ci + n, 0);
    for (std::size_t q = 0; q < kq; ++q) {
      const std::int8_t* wq = w.data.data() + q * w.n_pad * 4;
      const std::int32_t a0 = ai[4 * q], a1 = ai[4 * q + 1], a2 = ai[4 * q + 2], a3 = ai[4 * q + 3];
      for (std::size_t j = 0; j < n; ++j)
        ci[j] += a0 * wq[4 * j] + a1 * wq[4 * j + 1] + a2 * wq[4 * j + 2] + a3 * wq[4 * j + 3];
    }
  }
#endif
}

}  // namespace waveformer::kernels
