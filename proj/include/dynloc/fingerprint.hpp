#pragma once

#include <cstddef>
#include <optional>

#include "dynloc/autodiff.hpp"
#include "dynloc/channel.hpp"
#include "dynloc/complex_matrix.hpp"
#include "dynloc/geometry.hpp"

namespace dynloc {

// Angle-delay fingerprint; position and domain label travel with it when
// known (domain 0 = source, 1 = target).
struct Fingerprint {
  CMatrix entries;
  std::optional<Vec2> position;
  std::optional<int> domain_label;
};

// Real-valued view of a fingerprint for the networks: channel 0 holds real
// parts, channel 1 imaginary parts, both divided by `scale`.
struct RealFingerprintTensor {
  Tensor values;  // shape (2, L, K)
  double scale = 1.0;
};

// Unitary DFT matrix, [F]_ij = exp(-j*2*pi*i*j/K) / sqrt(K).
CMatrix unitary_dft(std::size_t k);

// Phase-shifted DFT matrix, [V]_ij = exp(-j*2*pi*i*(j - L/2)/L) / sqrt(L).
// L must be even so the half shift is integral.
CMatrix shifted_dft(std::size_t l);

// Angle-delay transform H = V^H * Htilde * F. Energy preserving.
Fingerprint to_adcm(const ChannelMatrix& channel);

// Splits a fingerprint into stacked real/imaginary channels divided by scale.
RealFingerprintTensor to_real_tensor(const Fingerprint& fp, double scale);

// Exact inverse of to_real_tensor.
CMatrix from_real_tensor(const RealFingerprintTensor& t);

}  // namespace dynloc
