#pragma once

#include <cstdint>
#include <vector>

namespace ot {

// Hand-rolled accumulating GEMM kernels. Every output element is a strict
// ascending-k sum, so results are bit-identical across runs and platforms
// with the same FP contraction settings. The ikj loop lets the compiler
// vectorize over j while preserving that per-element order.

// c[m,n] += a[m,k] * b[k,n]
template <class S>
void gemm_acc(S* c, const S* a, const S* b, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    S* crow = c + i * n;
    const S* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T. Materializes b^T once so the inner loops run
// the same contiguous strict-k pattern as gemm_acc.
template <class S>
void gemm_acc_nt(S* c, const S* a, const S* b, int64_t m, int64_t k,
                 int64_t n) {
  std::vector<S> bt(static_cast<size_t>(k) * static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r)
    for (int64_t p = 0; p < k; ++p) bt[p * n + r] = b[r * k + p];
  gemm_acc(c, a, bt.data(), m, k, n);
}

// c[k,n] += a[m,k]^T * b[m,n]
template <class S>
void gemm_acc_tn(S* c, const S* a, const S* b, int64_t m, int64_t k,
                 int64_t n) {
  std::vector<S> at(static_cast<size_t>(k) * static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  gemm_acc(c, at.data(), b, k, m, n);
}

}  // namespace ot
