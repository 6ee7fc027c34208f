#pragma once

#include <bit>
#include <cstdint>
#include <limits>

namespace helix::kernels {

// Branch-free exp that the compiler can vectorize. Both the parallel and the
// serial kernels call it, so they round identically on every element.
// Within 2 ulp of std::exp over [-708.39, 709.78]. Results below the smallest
// normal double flush to zero, larger arguments give +inf, NaN propagates.
[[gnu::always_inline]] inline double poly_exp(double x) {
  constexpr double log2e = 1.4426950408889634;
  constexpr double ln2_hi = 6.93147180369123816490e-01;
  constexpr double ln2_lo = 1.90821492927058770002e-10;
  constexpr double lo = -708.3964185322641;
  constexpr double hi = 709.782712893384;
  const double xc = x < lo ? lo : (x > hi ? hi : x);
  const double n = __builtin_floor(xc * log2e + 0.5);
  const double r = (xc - n * ln2_hi) - n * ln2_lo;
  // Taylor series to degree 13; |r| <= ln2/2 keeps the tail below 1e-17.
  double p = 1.0 / 6227020800.0;
  p = p * r + 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  // 2^n split in two factors so n = 1024 does not overflow the exponent field.
  const auto ni = static_cast<std::int64_t>(n);
  const std::int64_t n1 = ni / 2, n2 = ni - n1;
  const double s1 = std::bit_cast<double>(static_cast<std::uint64_t>(n1 + 1023) << 52);
  const double s2 = std::bit_cast<double>(static_cast<std::uint64_t>(n2 + 1023) << 52);
  double y = p * s1 * s2;
  y = x < lo ? 0.0 : y;
  y = x > hi ? std::numeric_limits<double>::infinity() : y;
  return x != x ? x : y;
}

}  // namespace helix::kernels
