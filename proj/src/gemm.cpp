#include "dynloc/gemm.hpp"

#include <cstring>
#include <vector>

namespace dynloc {
namespace {

// Thread-local scratch for the transposed-operand paths; training runs one
// model per thread, so no sharing.
std::vector<double>& scratch() {
  thread_local std::vector<double> buf;
  return buf;
}

constexpr std::size_t kColBlock = 32;

// Core kernel: 4 rows of A against a 32-column panel of B, with the C tile
// accumulated in locals so the compiler keeps it in registers.
void gemm_nn_block(std::size_t m, std::size_t n, std::size_t k,
                   const double* __restrict a, std::size_t lda,
                   const double* __restrict b, std::size_t ldb,
                   double* __restrict c, std::size_t ldc) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t jn = (n - j0 < kColBlock) ? (n - j0) : kColBlock;
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
      const double* a0 = a + i * lda;
      const double* a1 = a0 + lda;
      const double* a2 = a1 + lda;
      const double* a3 = a2 + lda;
      double acc0[kColBlock] = {0}, acc1[kColBlock] = {0};
      double acc2[kColBlock] = {0}, acc3[kColBlock] = {0};
      if (jn == kColBlock) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double* bk = b + kk * ldb + j0;
          const double v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
          for (std::size_t j = 0; j < kColBlock; ++j) {
            const double bv = bk[j];
            acc0[j] += v0 * bv;
            acc1[j] += v1 * bv;
            acc2[j] += v2 * bv;
            acc3[j] += v3 * bv;
          }
        }
      } else {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double* bk = b + kk * ldb + j0;
          const double v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
          for (std::size_t j = 0; j < jn; ++j) {
            const double bv = bk[j];
            acc0[j] += v0 * bv;
            acc1[j] += v1 * bv;
            acc2[j] += v2 * bv;
            acc3[j] += v3 * bv;
          }
        }
      }
      double* c0 = c + i * ldc + j0;
      double* c1 = c0 + ldc;
      double* c2 = c1 + ldc;
      double* c3 = c2 + ldc;
      for (std::size_t j = 0; j < jn; ++j) {
        c0[j] += acc0[j];
        c1[j] += acc1[j];
        c2[j] += acc2[j];
        c3[j] += acc3[j];
      }
    }
    for (; i < m; ++i) {
      const double* ai = a + i * lda;
      double acc[kColBlock] = {0};
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double v = ai[kk];
        const double* bk = b + kk * ldb + j0;
        for (std::size_t j = 0; j < jn; ++j) acc[j] += v * bk[j];
      }
      double* ci = c + i * ldc + j0;
      for (std::size_t j = 0; j < jn; ++j) ci[j] += acc[j];
    }
  }
}

void zero_c(std::size_t m, std::size_t n, double* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    std::memset(c + i * ldc, 0, n * sizeof(double));
  }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             std::size_t lda, const double* b, std::size_t ldb, double* c,
             std::size_t ldc, bool accumulate) {
  if (!accumulate) zero_c(m, n, c, ldc);
  gemm_nn_block(m, n, k, a, lda, b, ldb, c, ldc);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             std::size_t lda, const double* b, std::size_t ldb, double* c,
             std::size_t ldc, bool accumulate) {
  // Transpose B (n x k) into (k x n) scratch, then run the NN kernel.
  auto& bt = scratch();
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * ldb;
    for (std::size_t kk = 0; kk < k; ++kk) bt[kk * n + j] = bj[kk];
  }
  if (!accumulate) zero_c(m, n, c, ldc);
  gemm_nn_block(m, n, k, a, lda, bt.data(), n, c, ldc);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             std::size_t lda, const double* b, std::size_t ldb, double* c,
             std::size_t ldc, bool accumulate) {
  auto& at = scratch();
  at.resize(m * k);
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* ak = a + kk * lda;
    for (std::size_t i = 0; i < m; ++i) at[i * k + kk] = ak[i];
  }
  if (!accumulate) zero_c(m, n, c, ldc);
  gemm_nn_block(m, n, k, at.data(), k, b, ldb, c, ldc);
}

}  // namespace dynloc
