#include "dynloc/complex_matrix.hpp"

#include <cmath>

#include "dynloc/errors.hpp"

namespace dynloc {

double CMatrix::frobenius_norm() const {
  double s = 0.0;
  for (const Complex& v : data) s += std::norm(v);
  return std::sqrt(s);
}

CMatrix cmatmul(const CMatrix& a, const CMatrix& b) {
  if (a.cols != b.rows) throw InvalidArgument("cmatmul: dimension mismatch");
  CMatrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const Complex av = a.at(i, k);
      for (std::size_t j = 0; j < b.cols; ++j) {
        c.at(i, j) += av * b.at(k, j);
      }
    }
  }
  return c;
}

CMatrix chermitian(const CMatrix& a) {
  CMatrix h(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < a.cols; ++j) {
      h.at(j, i) = std::conj(a.at(i, j));
    }
  }
  return h;
}

}  // namespace dynloc
