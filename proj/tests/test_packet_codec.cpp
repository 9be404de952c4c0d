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

#include <catch_amalgamated.hpp>

#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "etrace/packet.hpp"

using namespace etrace;

namespace
{
  // Independent width oracle: smallest n = 8 - offset + 8k for which value
  // lies in the two's-complement range of n bits.
  unsigned oracleWidth(int64_t value, unsigned offset)
  {
    for (unsigned n = 8 - offset;; n += 8)
      {
        if (n >= 64)
          return n;
        int64_t lo = -(int64_t(1) << (n - 1));
        int64_t hi = (int64_t(1) << (n - 1)) - 1;
        if (value >= lo and value <= hi)
          return n;
      }
  }

  uint8_t packBits(std::initializer_list<int> bits)
  {
    uint8_t b = 0;
    int i = 0;
    for (int bit : bits)
      b |= uint8_t(bit << i++);
    return b;
  }

  std::vector<uint8_t> fromHex(const std::string& h)
  {
    std::vector<uint8_t> out;
    for (size_t i = 0; i + 1 < h.size(); i += 2)
      out.push_back(static_cast<uint8_t>(std::stoul(h.substr(i, 2), nullptr, 16)));
    return out;
  }

  Errc decodeError(std::vector<uint8_t> bytes)
  {
    try
      {
        decodePacket(bytes);
      }
    catch (const Error& e)
      {
        return e.code();
      }
    FAIL("decoded without error");
    return Errc::IoError;
  }
}

TEST_CASE("compress zero and minus one at offset 2")
{
  auto zero = compressSigned(0, 2);
  CHECK(zero.size() == 6);
  for (size_t i = 0; i < 6; ++i)
    CHECK_FALSE(zero.bit(i));
  CHECK(decompressSigned(zero, 6) == 0);

  auto ones = compressSigned(-1, 2);
  CHECK(ones.size() == 6);
  for (size_t i = 0; i < 6; ++i)
    CHECK(ones.bit(i));
  CHECK(decompressSigned(ones, 6) == -1);
}

TEST_CASE("0x80 at offset 2 needs 14 bits")
{
  CHECK(oracleWidth(0x80, 2) == 14);
  auto frag = compressSigned(0x80, 2);
  CHECK(frag.size() == 14);
  CHECK(frag.bytes() == std::vector<uint8_t>{0x80, 0x00});
  CHECK(decompressSigned(frag, 14) == 0x80);
}

TEST_CASE("compressed width matches the brute-force oracle")
{
  std::mt19937_64 rng(11);
  std::vector<int64_t> values = {0, 1, -1, 31, -32, 32, 127, -128, 128,
                                 std::numeric_limits<int64_t>::max(),
                                 std::numeric_limits<int64_t>::min(),
                                 std::numeric_limits<int64_t>::max() - 1,
                                 std::numeric_limits<int64_t>::min() + 1};
  for (int i = 0; i < 2000; ++i)
    values.push_back(static_cast<int64_t>(rng()) >> (rng() % 64));
  for (unsigned offset = 0; offset < 8; ++offset)
    for (int64_t v : values)
      {
        unsigned n = compressedWidth(v, offset);
        REQUIRE(n == oracleWidth(v, offset));
        REQUIRE((offset + n) % 8 == 0);
        auto frag = compressSigned(v, offset);
        REQUIRE(frag.size() == n);
        REQUIRE(decompressSigned(frag, n) == v);
      }
}

TEST_CASE("support packet packs into one byte")
{
  // format 11, subformat 11, enabled 1, qual 01, pad 0.
  uint8_t expected = packBits({1, 1, 1, 1, 1, 1, 0, 0});
  CHECK(expected == 0x3F);
  CHECK(encodePacket(Support{true, QualStatus::EndedReported}) == std::vector<uint8_t>{expected});
  CHECK(encodePacket(Support{false, QualStatus::EndedReported}) == std::vector<uint8_t>{0x2F});
}

TEST_CASE("sync start header then address from offset 6")
{
  auto bytes = encodePacket(SyncStart{3, 0x80000000});
  unsigned n = oracleWidth(0x80000000, 6);
  CHECK(n == 34);
  CHECK(bytes.size() == (6 + n) / 8);
  CHECK((bytes[0] & 0x3F) == packBits({1, 1, 0, 0, 1, 1}));
}

TEST_CASE("small deltas fit one byte")
{
  CHECK(encodePacket(AddrOnly{0}) == std::vector<uint8_t>{0x02});
  for (int64_t d = -32; d < 32; ++d)
    CHECK(encodePacket(AddrOnly{d}).size() == 1);
  CHECK(encodePacket(AddrOnly{32}).size() == 2);
  CHECK(encodePacket(AddrOnly{-33}).size() == 2);
}

TEST_CASE("full branch map is five bytes")
{
  BranchMapPkt full{31, 0x55555555u & 0x7fffffffu, 0};
  auto bytes = encodePacket(full);
  CHECK(bytes.size() == 5);
  CHECK(decodePacket(bytes) == TracePacket{full});
}

TEST_CASE("golden payloads")
{
  std::ifstream in(std::string(ETRACE_FIXTURES) + "/golden_packets.txt");
  REQUIRE(in);
  std::string line;
  size_t rows = 0;
  while (std::getline(in, line))
    {
      if (line.empty() or line[0] == '#')
        continue;
      auto bar = line.find(" | ");
      REQUIRE(bar != std::string::npos);
      auto packet = parsePacket(line.substr(0, bar));
      auto bytes = fromHex(line.substr(bar + 3));
      INFO(line);
      CHECK(encodePacket(packet) == bytes);
      CHECK(decodePacket(bytes) == packet);
      CHECK(toString(packet) == line.substr(0, bar));
      ++rows;
    }
  CHECK(rows >= 30);
}

TEST_CASE("decode errors")
{
  CHECK(decodeError({}) == Errc::TruncatedPayload);
  CHECK(decodeError({0x00}) == Errc::UnknownFormat);
  CHECK(decodeError({0x0b}) == Errc::UnknownFormat);          // Subformat 2.
  CHECK(decodeError({packBits({1, 1, 1, 1, 1, 1, 1, 0})}) == Errc::InvalidQualStatus);
  CHECK(decodeError({0x3F, 0x00}) == Errc::MalformedPayload);
  CHECK(decodeError({0x01, 0x00, 0x00}) == Errc::TruncatedPayload);   // Short full map.
  CHECK(decodeError({0x07, 0x00}) == Errc::TruncatedPayload);         // Short trap.
}

TEST_CASE("encode rejects invalid packets")
{
  auto code = [](const TracePacket& p) {
    try
      {
        encodePacket(p);
      }
    catch (const Error& e)
      {
        return e.code();
      }
    return Errc::IoError;
  };
  CHECK(code(BranchMapPkt{0, 0, 0}) == Errc::InvariantViolation);
  CHECK(code(BranchMapPkt{3, 0xff, 0}) == Errc::InvariantViolation);
  CHECK(code(BranchMapPkt{31, 0, 4}) == Errc::InvariantViolation);
  CHECK(code(SyncStart{4, 0}) == Errc::InvariantViolation);
  CHECK(code(Support{true, static_cast<QualStatus>(3)}) == Errc::InvalidQualStatus);
}

TEST_CASE("text form round trips")
{
  std::vector<TracePacket> packets = {
    SyncStart{3, 0x80000000}, Trap{true, 1, 7, 0x10, 0x8f000000}, Support{true, QualStatus::TraceLost},
    AddrOnly{-4}, BranchMapPkt{5, 0b00101, 16}, BranchMapPkt{31, 0x7fffffff, 0}};
  for (const auto& p : packets)
    CHECK(parsePacket(toString(p)) == p);
  CHECK_THROWS_AS(parsePacket("bogus delta=1"), Error);
}
