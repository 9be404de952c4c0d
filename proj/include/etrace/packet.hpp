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
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "etrace/bits.hpp"
#include "etrace/error.hpp"
#include "etrace/instruction_model.hpp"

namespace etrace
{

  /// Packet wire layouts. Every field is appended LSB-first; only the last
  /// field of a packet is variable length and its width is recovered from
  /// the payload length.
  ///
  ///   format 01  branch map : branches(5) map(b) [delta, compressed]
  ///                           branches == 0 means 31 map bits, no delta
  ///   format 10  address    : delta, compressed from bit 2
  ///   format 11  sub 00 sync    : priv(2) address, compressed from bit 6
  ///              sub 01 trap    : interrupt(1) priv(2) pad(1) cause(16)
  ///                               tval(64) handler, compressed from bit 88
  ///              sub 11 support : enabled(1) qual(2) pad(1)
  ///   format 00 and subformat 10 are reserved.

  constexpr size_t kMaxPayload = 255;
  constexpr unsigned kMaxBranches = 31;

  struct SyncStart
  {
    uint8_t priv = 3;
    uint64_t address = 0;
    bool operator==(const SyncStart&) const = default;
  };

  struct Trap
  {
    bool interrupt = false;
    uint8_t priv = 3;
    uint16_t cause = 0;
    uint64_t tval = 0;
    uint64_t handlerAddress = 0;
    bool operator==(const Trap&) const = default;
  };

  enum class QualStatus : uint8_t
  {
    NoChange = 0,
    EndedReported = 1,
    TraceLost = 2,
  };

  struct Support
  {
    bool enabled = true;
    QualStatus qual = QualStatus::NoChange;
    bool operator==(const Support&) const = default;
  };

  /// Differential address: target minus the last reported address.
  struct AddrOnly
  {
    int64_t delta = 0;
    bool operator==(const AddrOnly&) const = default;
  };

  /// Branch outcomes, oldest in bit 0; a set bit means not taken. A full
  /// map (count == 31) carries no address and its delta is zero.
  struct BranchMapPkt
  {
    uint8_t count = 0;
    uint32_t bits = 0;
    int64_t delta = 0;

    bool full() const
    { return count == kMaxBranches; }

    bool operator==(const BranchMapPkt&) const = default;
  };

  using TracePacket = std::variant<SyncStart, Trap, Support, AddrOnly, BranchMapPkt>;

  enum class PacketKind : uint8_t
  { SyncStart, Trap, Support, AddrOnly, BranchMap };

  constexpr size_t kPacketKinds = 5;

  inline PacketKind kindOf(const TracePacket& p)
  { return static_cast<PacketKind>(p.index()); }

  inline const char* kindName(PacketKind k)
  {
    switch (k)
      {
      case PacketKind::SyncStart: return "sync";
      case PacketKind::Trap:      return "trap";
      case PacketKind::Support:   return "support";
      case PacketKind::AddrOnly:  return "addr";
      case PacketKind::BranchMap: return "bmap";
      }
    return "?";
  }

  /// True for packets that carry an address the decoder resolves against.
  inline bool carriesAddress(const TracePacket& p)
  {
    if (auto bm = std::get_if<BranchMapPkt>(&p))
      return not bm->full();
    return not std::holds_alternative<Support>(p);
  }

  namespace detail
  {
    inline uint32_t lowMask(unsigned n)
    { return n >= 32 ? 0xffffffffu : ((1u << n) - 1); }

    inline void checkPacket(const TracePacket& packet)
    {
      auto bad = [](const char* why) { return Error(Errc::InvariantViolation, why); };
      std::visit([&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SyncStart> or std::is_same_v<T, Trap>)
          {
            if (p.priv > 3)
              throw bad("priv out of range");
          }
        else if constexpr (std::is_same_v<T, Support>)
          {
            if (static_cast<unsigned>(p.qual) > 2)
              throw Error(Errc::InvalidQualStatus, "qual_status out of range");
          }
        else if constexpr (std::is_same_v<T, BranchMapPkt>)
          {
            if (p.count == 0 or p.count > kMaxBranches)
              throw bad("branch count must be 1..31");
            if (p.bits & ~lowMask(p.count))
              throw bad("branch bits beyond count");
            if (p.full() and p.delta != 0)
              throw bad("full branch map carries no address");
          }
      }, packet);
    }
  }

  /// Serialize one packet into its payload bytes.
  inline std::vector<uint8_t> encodePacket(const TracePacket& packet)
  {
    detail::checkPacket(packet);
    BitSequence seq;
    std::visit([&](const auto& p) {
      using T = std::decay_t<decltype(p)>;
      if constexpr (std::is_same_v<T, SyncStart>)
        {
          seq.append(3, 2);
          seq.append(0, 2);
          seq.append(p.priv, 2);
          seq.appendCompressed(static_cast<int64_t>(p.address));
        }
      else if constexpr (std::is_same_v<T, Trap>)
        {
          seq.append(3, 2);
          seq.append(1, 2);
          seq.append(p.interrupt, 1);
          seq.append(p.priv, 2);
          seq.append(0, 1);
          seq.append(p.cause, 16);
          seq.append(p.tval, 64);
          seq.appendCompressed(static_cast<int64_t>(p.handlerAddress));
        }
      else if constexpr (std::is_same_v<T, Support>)
        {
          seq.append(3, 2);
          seq.append(3, 2);
          seq.append(p.enabled, 1);
          seq.append(static_cast<unsigned>(p.qual), 2);
          seq.append(0, 1);
        }
      else if constexpr (std::is_same_v<T, AddrOnly>)
        {
          seq.append(2, 2);
          seq.appendCompressed(p.delta);
        }
      else
        {
          seq.append(1, 2);
          if (p.full())
            {
              seq.append(0, 5);
              seq.append(p.bits, kMaxBranches);
              seq.append(0, 2);
            }
          else
            {
              seq.append(p.count, 5);
              seq.append(p.bits, p.count);
              seq.appendCompressed(p.delta);
            }
        }
    }, packet);

    if (seq.bytes().size() > kMaxPayload)
      throw Error(Errc::PayloadTooLong, std::to_string(seq.bytes().size()) + " bytes");
    return seq.takeBytes();
  }

  /// Inverse of encodePacket.
  inline TracePacket decodePacket(std::span<const uint8_t> payload)
  {
    if (payload.empty())
      throw Error(Errc::TruncatedPayload, "empty payload");
    const size_t total = payload.size() * 8;
    BitReader r(payload);

    // Width left for a trailing variable field after `fixed` bits.
    auto tail = [&](size_t fixed, size_t minimum) -> unsigned {
      if (total < fixed + minimum)
        throw Error(Errc::TruncatedPayload, std::to_string(payload.size()) + " bytes");
      return static_cast<unsigned>(total - fixed);
    };
    auto exactLength = [&](size_t bytes) {
      if (payload.size() < bytes)
        throw Error(Errc::TruncatedPayload, std::to_string(payload.size()) + " bytes");
      if (payload.size() > bytes)
        throw Error(Errc::MalformedPayload, "trailing bytes after fixed-length packet");
    };

    unsigned format = static_cast<unsigned>(r.read(2));
    switch (format)
      {
      case 1:
        {
          BranchMapPkt p;
          unsigned branches = static_cast<unsigned>(r.read(5));
          if (branches == 0)
            {
              exactLength(5);
              p.count = kMaxBranches;
              p.bits = static_cast<uint32_t>(r.read(kMaxBranches));
              return p;
            }
          unsigned width = tail(7 + branches, 1);
          p.count = static_cast<uint8_t>(branches);
          p.bits = static_cast<uint32_t>(r.read(branches));
          p.delta = r.readSigned(width);
          return p;
        }
      case 2:
        return AddrOnly{r.readSigned(tail(2, 1))};
      case 3:
        break;
      default:
        throw Error(Errc::UnknownFormat, "format 0 is reserved");
      }

    unsigned subformat = static_cast<unsigned>(r.read(2));
    switch (subformat)
      {
      case 0:
        {
          SyncStart p;
          p.priv = static_cast<uint8_t>(r.read(2));
          p.address = static_cast<uint64_t>(r.readSigned(tail(6, 1)));
          return p;
        }
      case 1:
        {
          unsigned width = tail(88, 1);
          Trap p;
          p.interrupt = r.read(1);
          p.priv = static_cast<uint8_t>(r.read(2));
          r.read(1);
          p.cause = static_cast<uint16_t>(r.read(16));
          p.tval = r.read(64);
          p.handlerAddress = static_cast<uint64_t>(r.readSigned(width));
          return p;
        }
      case 3:
        {
          exactLength(1);
          Support p;
          p.enabled = r.read(1);
          unsigned qual = static_cast<unsigned>(r.read(2));
          if (qual > 2)
            throw Error(Errc::InvalidQualStatus, std::to_string(qual));
          p.qual = static_cast<QualStatus>(qual);
          return p;
        }
      default:
        throw Error(Errc::UnknownFormat, "subformat 2 (context) is reserved");
      }
  }

  // ---------------------------------------------------------------------
  // Text form used by fixtures and the CLI dump.

  inline const char* qualName(QualStatus q)
  {
    switch (q)
      {
      case QualStatus::NoChange:      return "nochange";
      case QualStatus::EndedReported: return "ended";
      case QualStatus::TraceLost:     return "lost";
      }
    return "?";
  }

  inline std::string toString(const TracePacket& packet)
  {
    std::ostringstream os;
    std::visit([&](const auto& p) {
      using T = std::decay_t<decltype(p)>;
      if constexpr (std::is_same_v<T, SyncStart>)
        os << "sync priv=" << unsigned(p.priv) << " addr=" << detail::hex(p.address);
      else if constexpr (std::is_same_v<T, Trap>)
        os << "trap interrupt=" << p.interrupt << " priv=" << unsigned(p.priv) << " cause=" << p.cause
           << " tval=" << detail::hex(p.tval) << " handler=" << detail::hex(p.handlerAddress);
      else if constexpr (std::is_same_v<T, Support>)
        os << "support enabled=" << p.enabled << " qual=" << qualName(p.qual);
      else if constexpr (std::is_same_v<T, AddrOnly>)
        os << "addr delta=" << p.delta;
      else
        {
          os << "bmap count=" << unsigned(p.count) << " bits=";
          for (unsigned i = 0; i < p.count; ++i)
            os << ((p.bits >> i) & 1);
          if (not p.full())
            os << " delta=" << p.delta;
        }
    }, packet);
    return os.str();
  }

  /// Parse the text form produced by toString.
  inline TracePacket parsePacket(std::string_view text)
  {
    std::istringstream is{std::string(text)};
    std::string kind;
    is >> kind;
    std::map<std::string, std::string> kv;
    for (std::string tok; is >> tok;)
      {
        auto eq = tok.find('=');
        if (eq == std::string::npos)
          throw Error(Errc::MalformedLine, "bad token '" + tok + "'");
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
      }
    auto num = [&](const char* key) -> uint64_t {
      uint64_t v = 0;
      auto it = kv.find(key);
      if (it == kv.end() or not detail::parseNumber(it->second, v))
        throw Error(Errc::MalformedLine, std::string("missing or bad '") + key + "'");
      return v;
    };
    auto sdec = [&](const char* key) -> int64_t {
      int64_t v = 0;
      auto it = kv.find(key);
      if (it == kv.end() or not detail::parseDec(it->second, v))
        throw Error(Errc::MalformedLine, std::string("missing or bad '") + key + "'");
      return v;
    };

    if (kind == "sync")
      return SyncStart{uint8_t(num("priv")), num("addr")};
    if (kind == "trap")
      return Trap{num("interrupt") != 0, uint8_t(num("priv")), uint16_t(num("cause")), num("tval"),
                  num("handler")};
    if (kind == "support")
      {
        const auto& q = kv["qual"];
        QualStatus qual = q == "ended" ? QualStatus::EndedReported
          : q == "lost" ? QualStatus::TraceLost : QualStatus::NoChange;
        if (q != "ended" and q != "lost" and q != "nochange")
          throw Error(Errc::MalformedLine, "bad qual '" + q + "'");
        return Support{num("enabled") != 0, qual};
      }
    if (kind == "addr")
      return AddrOnly{sdec("delta")};
    if (kind == "bmap")
      {
        BranchMapPkt p;
        p.count = uint8_t(num("count"));
        const auto& bits = kv["bits"];
        if (bits.size() != p.count)
          throw Error(Errc::MalformedLine, "bit string length mismatch");
        for (size_t i = 0; i < bits.size(); ++i)
          if (bits[i] == '1')
            p.bits |= 1u << i;
        if (not p.full())
          p.delta = sdec("delta");
        return p;
      }
    throw Error(Errc::MalformedLine, "unknown packet kind '" + kind + "'");
  }

}
