#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

// Raw dense kernels shared by the autodiff ops and the INT8 inference path.
// All float kernels accumulate into C. Per-element summation order is fixed
// (ascending inner index) so results do not depend on the thread count.
namespace waveformer::kernels {

void set_num_threads(std::size_t n);
std::size_t num_threads();

// C[m×n] += A[m×k]·B[k×n]
template <typename T> void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
// C[m×n] += A[m×k]·B[n×k]ᵀ
template <typename T> void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
// C[m×n] += A[k×m]ᵀ·B[k×n]
template <typename T> void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// Int8 weights [k×n] repacked as [k_pad/4][n_pad][4] so that four consecutive
// inner-dimension bytes of one output column are contiguous.
struct PackedInt8 {
  std::size_t k = 0, n = 0, k_pad = 0, n_pad = 0;
  std::vector<std::int8_t> data;
  std::vector<std::int32_t> col_sums;  // Σ_k w[k, j], for zero-point correction
};

PackedInt8 pack_int8(const std::int8_t* w, std::size_t k, std::size_t n);

// C[m×n] = A[m×k_pad]·W over u8×s8 with exact int32 accumulation. Bytes of A
// past w.k must be zero.
void gemm_u8s8(const std::uint8_t* a, const PackedInt8& w, std::int32_t* c, std::size_t m);

// True when the build uses the AVX-512 VNNI path for gemm_u8s8.
bool has_vnni();

}  // namespace waveformer::kernels
