// Copyright 2026 The etrace-ibt Authors
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

#include <cstdint>
#include <span>
#include <vector>

namespace etrace
{

  /// Sign-extend the low `width` bits of raw to 64 bits.
  constexpr int64_t signExtend(uint64_t raw, unsigned width)
  {
    if (width >= 64)
      return static_cast<int64_t>(raw);
    unsigned shift = 64 - width;
    return static_cast<int64_t>(raw << shift) >> shift;
  }

  /// Smallest field width n that ends on a byte boundary when started at
  /// bit offset `offset` (0..7) and sign-extends back to `value`.
  constexpr unsigned compressedWidth(int64_t value, unsigned offset)
  {
    unsigned n = 8 - (offset & 7);
    while (n < 64 and signExtend(static_cast<uint64_t>(value), n) != value)
      n += 8;
    return n;
  }

  /// Growable LSB-first bit string: bit j lives in byte j/8 at position j%8.
  class BitSequence
  {
  public:
    BitSequence() = default;

    BitSequence(std::span<const uint8_t> bytes, size_t bitCount)
      : bytes_(bytes.begin(), bytes.end()), bitCount_(bitCount)
    { bytes_.resize((bitCount + 7) / 8); }

    size_t size() const
    { return bitCount_; }

    const std::vector<uint8_t>& bytes() const
    { return bytes_; }

    std::vector<uint8_t> takeBytes()
    { return std::move(bytes_); }

    bool bit(size_t j) const
    { return (bytes_[j >> 3] >> (j & 7)) & 1; }

    void pushBit(bool b)
    {
      if ((bitCount_ & 7) == 0)
        bytes_.push_back(0);
      if (b)
        bytes_.back() |= uint8_t(1u << (bitCount_ & 7));
      ++bitCount_;
    }

    /// Append the low `width` bits of value (width <= 64), LSB first.
    void append(uint64_t value, unsigned width)
    {
      for (unsigned i = 0; i < width; ++i)
        pushBit((value >> i) & 1);
    }

    /// Append `width` bits of a signed value; widths above 64 repeat the
    /// sign bit.
    void appendSigned(int64_t value, unsigned width)
    {
      auto raw = static_cast<uint64_t>(value);
      append(raw, width < 64 ? width : 64);
      for (unsigned i = 64; i < width; ++i)
        pushBit(value < 0);
    }

    /// Append value in its minimal byte-closing width; returns the width.
    unsigned appendCompressed(int64_t value)
    {
      unsigned n = compressedWidth(value, bitCount_ & 7);
      appendSigned(value, n);
      return n;
    }

  private:
    std::vector<uint8_t> bytes_;
    size_t bitCount_ = 0;
  };

  /// Sequential reader over LSB-first bytes.
  class BitReader
  {
  public:
    explicit BitReader(std::span<const uint8_t> bytes)
      : bytes_(bytes)
    { }

    size_t position() const
    { return pos_; }

    size_t remaining() const
    { return bytes_.size() * 8 - pos_; }

    uint64_t read(unsigned width)
    {
      uint64_t v = 0;
      for (unsigned i = 0; i < width; ++i, ++pos_)
        if (i < 64)
          v |= uint64_t((bytes_[pos_ >> 3] >> (pos_ & 7)) & 1) << i;
      return v;
    }

    int64_t readSigned(unsigned width)
    { return signExtend(read(width), width); }

  private:
    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
  };

  /// Fragment holding `value` compressed as if it began at bit `offset`
  /// of a byte. The fragment itself starts at bit 0.
  inline BitSequence compressSigned(int64_t value, unsigned offset)
  {
    BitSequence seq;
    seq.appendSigned(value, compressedWidth(value, offset));
    return seq;
  }

  inline int64_t decompressSigned(const BitSequence& fragment, unsigned width)
  {
    BitReader r(fragment.bytes());
    return r.readSigned(width);
  }

}
