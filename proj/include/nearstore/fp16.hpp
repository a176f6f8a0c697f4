// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <vector>

namespace nearstore {

// Binary16 value kept as raw bits. Conversions below are branch-exact and do
// not depend on hardware float16 support; narrowing rounds to nearest-even.
struct half {
  std::uint16_t bits = 0;

  friend bool operator==(half a, half b) { return a.bits == b.bits; }
  friend bool operator!=(half a, half b) { return a.bits != b.bits; }
};

static_assert(sizeof(half) == 2);

inline std::uint32_t half_to_float_bits(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1Fu;
  std::uint32_t man = h & 0x3FFu;
  if (exp == 31u) {
    // Inf / NaN; keep the payload so NaNs stay NaNs.
    return sign | 0x7F800000u | (man << 13);
  }
  if (exp == 0u) {
    if (man == 0u) return sign;
    // Subnormal: normalize into a regular float.
    std::uint32_t shift = 0;
    while (!(man & 0x400u)) {
      man <<= 1;
      ++shift;
    }
    man &= 0x3FFu;
    const std::uint32_t fexp = 113u - shift;  // 127 - 15 + 1 - (shift + 1)
    return sign | (fexp << 23) | (man << 13);
  }
  return sign | ((exp + 112u) << 23) | (man << 13);
}

inline std::uint16_t float_to_half_bits(float f) {
  const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
  const std::uint32_t sign = (x >> 16) & 0x8000u;
  const std::uint32_t absx = x & 0x7FFFFFFFu;
  const std::uint32_t fman = x & 0x7FFFFFu;

  if (absx >= 0x7F800000u) {
    if (absx == 0x7F800000u) return static_cast<std::uint16_t>(sign | 0x7C00u);
    std::uint32_t payload = (fman >> 13) & 0x3FFu;
    if (payload == 0u) payload = 1u;  // keep NaN a NaN after truncation
    return static_cast<std::uint16_t>(sign | 0x7C00u | payload);
  }

  const int he = static_cast<int>(absx >> 23) - 127 + 15;  // half biased exponent

  // Round a significand with `extra` trailing bits to nearest, ties to even.
  const auto rne_shift = [](std::uint64_t sig, unsigned extra) -> std::uint64_t {
    if (extra == 0) return sig;
    if (extra >= 63) return 0;
    const std::uint64_t keep = sig >> extra;
    const std::uint64_t rem = sig & ((std::uint64_t{1} << extra) - 1);
    const std::uint64_t halfway = std::uint64_t{1} << (extra - 1);
    if (rem > halfway || (rem == halfway && (keep & 1u))) return keep + 1;
    return keep;
  };

  if (he >= 31) return static_cast<std::uint16_t>(sign | 0x7C00u);

  if (he <= 0) {
    // Result is half-subnormal (or rounds to it / to zero).
    const unsigned shift = 13u + static_cast<unsigned>(1 - he);
    if (shift > 40u) return static_cast<std::uint16_t>(sign);
    const std::uint64_t sig = std::uint64_t{fman} | 0x800000u;
    const std::uint64_t hman = rne_shift(sig, shift);
    // A carry into bit 10 lands exactly on the smallest normal.
    return static_cast<std::uint16_t>(sign | static_cast<std::uint32_t>(hman));
  }

  std::uint64_t hman = rne_shift(fman, 13);
  std::uint32_t hexp = static_cast<std::uint32_t>(he);
  if (hman == 0x400u) {  // mantissa overflowed into the next exponent
    hman = 0;
    ++hexp;
    if (hexp >= 31u) return static_cast<std::uint16_t>(sign | 0x7C00u);
  }
  return static_cast<std::uint16_t>(sign | (hexp << 10) |
                                    static_cast<std::uint32_t>(hman));
}

inline float widen(half h) { return std::bit_cast<float>(half_to_float_bits(h.bits)); }

inline half narrow(float f) { return half{float_to_half_bits(f)}; }

inline std::vector<float> widen_all(std::span<const half> xs) {
  std::vector<float> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = widen(xs[i]);
  return out;
}

inline std::vector<half> narrow_all(std::span<const float> xs) {
  std::vector<half> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = narrow(xs[i]);
  return out;
}

}  // namespace nearstore
