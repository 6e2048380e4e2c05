#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

// Raw float32 compute kernels. Every output element accumulates its k terms
// in ascending order, so results are identical from run to run and do not
// depend on tiling. Single-threaded.

namespace nsr::kern {

// C[M x N] += A[M x K] * B[K x N], all row-major.
inline void gemm_nn(float* C, const float* A, const float* B, int M, int K, int N) {
  constexpr int TI = 4, TJ = 32;
  int i = 0;
  for (; i + TI <= M; i += TI) {
    int j = 0;
    for (; j + TJ <= N; j += TJ) {
      float acc[TI][TJ] = {};
      for (int k = 0; k < K; ++k) {
        const float* brow = B + (size_t)k * N + j;
        for (int ii = 0; ii < TI; ++ii) {
          const float a = A[(size_t)(i + ii) * K + k];
          for (int jj = 0; jj < TJ; ++jj) acc[ii][jj] += a * brow[jj];
        }
      }
      for (int ii = 0; ii < TI; ++ii) {
        float* crow = C + (size_t)(i + ii) * N + j;
        for (int jj = 0; jj < TJ; ++jj) crow[jj] += acc[ii][jj];
      }
    }
    for (; j < N; ++j) {
      for (int ii = 0; ii < TI; ++ii) {
        float s = 0.f;
        for (int k = 0; k < K; ++k) s += A[(size_t)(i + ii) * K + k] * B[(size_t)k * N + j];
        C[(size_t)(i + ii) * N + j] += s;
      }
    }
  }
  for (; i < M; ++i) {
    for (int j = 0; j < N; ++j) {
      float s = 0.f;
      for (int k = 0; k < K; ++k) s += A[(size_t)i * K + k] * B[(size_t)k * N + j];
      C[(size_t)i * N + j] += s;
    }
  }
}

inline void transpose(float* dst, const float* src, int rows, int cols) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) dst[(size_t)c * rows + r] = src[(size_t)r * cols + c];
}

inline std::vector<float>& scratch() {
  thread_local std::vector<float> buf;
  return buf;
}

// C[M x N] += A[M x K] * B^T, where B is [N x K] row-major.
inline void gemm_nt(float* C, const float* A, const float* B, int M, int K, int N) {
  auto& t = scratch();
  if (t.size() < (size_t)K * N) t.resize((size_t)K * N);
  transpose(t.data(), B, N, K);
  gemm_nn(C, A, t.data(), M, K, N);
}

// C[M x N] += A^T * B, where A is [K x M] row-major.
inline void gemm_tn(float* C, const float* A, const float* B, int M, int K, int N) {
  auto& t = scratch();
  if (t.size() < (size_t)K * M) t.resize((size_t)K * M);
  transpose(t.data(), A, K, M);
  gemm_nn(C, t.data(), B, M, K, N);
}

inline void axpy(float* y, float a, const float* x, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace nsr::kern
