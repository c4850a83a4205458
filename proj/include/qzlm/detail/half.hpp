/* Copyright 2026 The qzlm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

// IEEE 754 binary16 conversions for the narrow checkpoint storage mode.

#include <cstdint>
#include <cstring>

namespace qzlm::detail {

// Round-to-nearest-even float32 -> float16.
inline std::uint16_t float_to_half(float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, 4);
  std::uint32_t sign = (bits >> 16) & 0x8000u;
  std::uint32_t exp = (bits >> 23) & 0xffu;
  std::uint32_t mant = bits & 0x7fffffu;

  if (exp == 0xffu) {  // inf / nan
    return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0));
  }
  int unbiased = static_cast<int>(exp) - 127;
  if (unbiased > 15) {  // overflow -> inf
    return static_cast<std::uint16_t>(sign | 0x7c00u);
  }
  if (unbiased >= -14) {  // normal half
    std::uint32_t half_exp = static_cast<std::uint32_t>(unbiased + 15);
    std::uint32_t half_mant = mant >> 13;
    std::uint32_t rest = mant & 0x1fffu;
    std::uint16_t h = static_cast<std::uint16_t>(sign | (half_exp << 10) | half_mant);
    if (rest > 0x1000u || (rest == 0x1000u && (half_mant & 1u))) {
      ++h;  // carries into the exponent correctly
    }
    return h;
  }
  if (unbiased >= -25) {  // subnormal half
    std::uint32_t full_mant = mant | 0x800000u;
    int shift = -unbiased - 14 + 13;  // 14..24
    std::uint32_t half_mant = full_mant >> shift;
    std::uint32_t rest = full_mant & ((1u << shift) - 1);
    std::uint32_t halfway = 1u << (shift - 1);
    std::uint16_t h = static_cast<std::uint16_t>(sign | half_mant);
    if (rest > halfway || (rest == halfway && (half_mant & 1u))) {
      ++h;
    }
    return h;
  }
  return static_cast<std::uint16_t>(sign);  // underflow -> signed zero
}

inline float half_to_float(std::uint16_t value) {
  std::uint32_t sign = (std::uint32_t{value} & 0x8000u) << 16;
  std::uint32_t exp = (value >> 10) & 0x1fu;
  std::uint32_t mant = value & 0x3ffu;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {  // subnormal: renormalize
      int shift = 0;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        ++shift;
      }
      mant &= 0x3ffu;
      bits = sign | ((127 - 15 - shift + 1) << 23) | (mant << 13);
    }
  } else if (exp == 0x1fu) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  float out;
  std::memcpy(&out, &bits, 4);
  return out;
}

}  // namespace qzlm::detail
