#include "dynloc/fingerprint.hpp"

#include <cmath>
#include <numbers>

#include "dynloc/errors.hpp"

namespace dynloc {

CMatrix unitary_dft(std::size_t k) {
  if (k < 1) throw InvalidArgument("unitary_dft: K must be >= 1");
  CMatrix f(k, k);
  const double root = 1.0 / std::sqrt(static_cast<double>(k));
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double phase = -2.0 * std::numbers::pi *
                           static_cast<double>(i * j) / static_cast<double>(k);
      f.at(i, j) = std::polar(root, phase);
    }
  }
  return f;
}

CMatrix shifted_dft(std::size_t l) {
  if (l < 1) throw InvalidArgument("shifted_dft: L must be >= 1");
  if (l % 2 != 0) throw InvalidArgument("shifted_dft: L must be even");
  CMatrix v(l, l);
  const double root = 1.0 / std::sqrt(static_cast<double>(l));
  const double half = static_cast<double>(l) / 2.0;
  for (std::size_t i = 0; i < l; ++i) {
    for (std::size_t j = 0; j < l; ++j) {
      const double phase = -2.0 * std::numbers::pi * static_cast<double>(i) *
                           (static_cast<double>(j) - half) / static_cast<double>(l);
      v.at(i, j) = std::polar(root, phase);
    }
  }
  return v;
}

Fingerprint to_adcm(const ChannelMatrix& channel) {
  const std::size_t l = channel.entries.rows;
  const std::size_t k = channel.entries.cols;
  if (l == 0 || k == 0) throw InvalidArgument("to_adcm: empty channel matrix");
  const CMatrix vh = chermitian(shifted_dft(l));
  const CMatrix f = unitary_dft(k);
  Fingerprint fp;
  fp.entries = cmatmul(cmatmul(vh, channel.entries), f);
  fp.position = channel.position;
  return fp;
}

RealFingerprintTensor to_real_tensor(const Fingerprint& fp, double scale) {
  if (!(scale > 0.0)) throw InvalidArgument("to_real_tensor: scale must be positive");
  const std::size_t l = fp.entries.rows;
  const std::size_t k = fp.entries.cols;
  RealFingerprintTensor out;
  out.scale = scale;
  out.values = Tensor({2, l, k});
  for (std::size_t i = 0; i < l * k; ++i) {
    out.values.values[i] = fp.entries.data[i].real() / scale;
    out.values.values[l * k + i] = fp.entries.data[i].imag() / scale;
  }
  return out;
}

CMatrix from_real_tensor(const RealFingerprintTensor& t) {
  if (t.values.rank() != 3 || t.values.shape[0] != 2) {
    throw InvalidArgument("from_real_tensor: expected shape (2,L,K)");
  }
  const std::size_t l = t.values.shape[1];
  const std::size_t k = t.values.shape[2];
  CMatrix m(l, k);
  for (std::size_t i = 0; i < l * k; ++i) {
    m.data[i] = Complex(t.values.values[i] * t.scale,
                        t.values.values[l * k + i] * t.scale);
  }
  return m;
}

}  // namespace dynloc
