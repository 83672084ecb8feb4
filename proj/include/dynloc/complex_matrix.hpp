#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace dynloc {

using Complex = std::complex<double>;

// Dense complex matrix, row-major.
struct CMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<Complex> data;

  CMatrix() = default;
  CMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c) {}

  Complex& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  Complex at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double frobenius_norm() const;
};

CMatrix cmatmul(const CMatrix& a, const CMatrix& b);
CMatrix chermitian(const CMatrix& a);  // conjugate transpose

}  // namespace dynloc
