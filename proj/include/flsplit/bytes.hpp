// Copyright 2026 The flsplit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flsplit/tensor.hpp"

namespace flsplit {

using Bytes = std::vector<std::uint8_t>;

// Little-endian append-only writer.
class ByteWriter {
 public:
  explicit ByteWriter(Bytes& out) : out_(out) {}

  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void f16(double v) { put(float_to_half(v), 2); }
  void raw(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
  void str(std::string_view s) {
    u64(s.size());
    out_.insert(out_.end(), s.begin(), s.end());
  }

  std::size_t size() const { return out_.size(); }

  // IEEE-754 binary16, round to nearest even.
  static std::uint16_t float_to_half(double value) {
    const auto f = std::bit_cast<std::uint32_t>(static_cast<float>(value));
    const std::uint32_t sign = (f >> 16) & 0x8000u;
    const std::int32_t exp = static_cast<std::int32_t>((f >> 23) & 0xffu) - 127 + 15;
    std::uint32_t mant = f & 0x7fffffu;
    if (((f >> 23) & 0xffu) == 0xffu) return static_cast<std::uint16_t>(sign | 0x7c00u | (mant ? 0x200u : 0u));
    if (exp >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);
    if (exp <= 0) {
      if (exp < -10) return static_cast<std::uint16_t>(sign);
      mant |= 0x800000u;
      const int shift = 14 - exp;
      std::uint32_t half = mant >> shift;
      const std::uint32_t rem = mant & ((1u << shift) - 1u);
      const std::uint32_t mid = 1u << (shift - 1);
      if (rem > mid || (rem == mid && (half & 1u))) ++half;
      return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (static_cast<std::uint32_t>(exp) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;
    return static_cast<std::uint16_t>(sign | half);
  }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  Bytes& out_;
};

// Bounds-checked little-endian reader; failures report the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> in, std::size_t base_offset = 0)
      : in_(in), base_(base_offset) {}

  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  double f16() { return half_to_float(static_cast<std::uint16_t>(get(2))); }
  std::string str(std::size_t max_len = 1u << 20) {
    const auto n = u64();
    if (n > max_len || n > remaining()) fail("string length " + std::to_string(n));
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCode::kFrame, what + " at offset " + std::to_string(offset()));
  }

  static double half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    std::uint32_t f;
    if (exp == 0) {
      if (mant == 0) {
        f = sign;
      } else {
        int e = -1;
        std::uint32_t m = mant;
        do {
          ++e;
          m <<= 1;
        } while ((m & 0x400u) == 0);
        f = sign | (static_cast<std::uint32_t>(127 - 15 - e) << 23) | ((m & 0x3ffu) << 13);
      }
    } else if (exp == 0x1f) {
      f = sign | 0x7f800000u | (mant << 13);
    } else {
      f = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return static_cast<double>(std::bit_cast<float>(f));
  }

 private:
  std::uint64_t get(int n) {
    if (remaining() < static_cast<std::size_t>(n)) fail("truncated input");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> in_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

}  // namespace flsplit
