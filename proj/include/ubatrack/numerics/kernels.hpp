#pragma once

// Raw row-major kernels shared by the differentiable ops. No graph logic here.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "ubatrack/numerics/tensor.hpp"

namespace ubatrack::kernels {

// C[M,N] (+)= A[M,K] * B[K,N]
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  for (std::size_t i = 0; i < M; ++i) {
    T* c_row = C + i * N;
    const T* a_row = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T a = a_row[k];
      const T* b_row = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  for (std::size_t k = 0; k < K; ++k) {
    const T* a_row = A + k * M;
    const T* b_row = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T a = a_row[i];
      T* c_row = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c_row[j] += a * b_row[j];
    }
  }
}

template <class T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T
template <class T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A,
             const T* B, T* C, bool accumulate) {
  std::vector<T> bt(N * K);
  transpose(N, K, B, bt.data());
  gemm_nn(M, N, K, A, bt.data(), C, accumulate);
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// out axis i = in axis perm[i]
template <class T>
std::vector<T> permute(const std::vector<T>& src, const Shape& shape,
                       const std::vector<std::size_t>& perm, Shape* out_shape = nullptr) {
  const std::size_t rank = shape.size();
  Shape dst_shape(rank);
  bool identity = true;
  for (std::size_t i = 0; i < rank; ++i) {
    dst_shape[i] = shape[perm[i]];
    identity = identity && perm[i] == i;
  }
  if (out_shape) *out_shape = dst_shape;
  if (identity) return src;

  const auto src_strides = strides_of(shape);
  std::vector<std::size_t> walk(rank);
  for (std::size_t i = 0; i < rank; ++i) walk[i] = src_strides[perm[i]];
  std::vector<T> dst(src.size());
  std::vector<std::size_t> index(rank, 0);
  std::size_t offset = 0;
  const std::size_t inner = rank ? dst_shape[rank - 1] : 1;
  const std::size_t inner_stride = rank ? walk[rank - 1] : 1;
  for (std::size_t out = 0; out < dst.size(); out += inner) {
    for (std::size_t j = 0; j < inner; ++j) dst[out + j] = src[offset + j * inner_stride];
    // advance every axis but the innermost
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      offset += walk[ax];
      if (++index[ax] < dst_shape[ax]) break;
      offset -= walk[ax] * dst_shape[ax];
      index[ax] = 0;
    }
  }
  return dst;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

}  // namespace ubatrack::kernels
