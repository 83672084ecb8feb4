#pragma once

#include <cstddef>

namespace dynloc {

// Dense double-precision matrix products, row-major. Accumulation order is
// fixed (k ascending per output element), so results are bit-reproducible
// for a given binary regardless of blocking.
//
// C (MxN) = A (MxK) * B (KxN), optionally accumulating into C.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             std::size_t lda, const double* b, std::size_t ldb, double* c,
             std::size_t ldc, bool accumulate);

// C = A * B^T where B is given as (N x K) row-major.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a,
             std::size_t lda, const double* b, std::size_t ldb, double* c,
             std::size_t ldc, bool accumulate);

// C = A^T * B where A is given as (K x M) row-major.
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a,
             std::size_t lda, const double* b, std::size_t ldb, double* c,
             std::size_t ldc, bool accumulate);

}  // namespace dynloc
