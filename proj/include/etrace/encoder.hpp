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

#include <algorithm>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "etrace/error.hpp"
#include "etrace/instruction_model.hpp"
#include "etrace/packet.hpp"

namespace etrace
{

  enum class ResyncMode : uint8_t
  { PacketCount, CycleCount };

  /// Half-open address range [lo, hi).
  struct AddrRange
  {
    uint64_t lo = 0;
    uint64_t hi = 0;
    bool operator==(const AddrRange&) const = default;
  };

  struct EncoderConfig
  {
    bool enabled = true;
    unsigned lanes = 1;
    uint8_t privAllow = 0xf;            // Bit p set: privilege level p is traced.
    std::vector<AddrRange> addrRanges;  // Empty: every address is traced.
    ResyncMode resyncMode = ResyncMode::PacketCount;
    uint64_t resyncThreshold = 1000;

    bool operator==(const EncoderConfig&) const = default;

    void validate() const
    {
      if (lanes == 0)
        throw Error(Errc::InvalidConfig, "lanes must be at least 1");
      if (resyncThreshold == 0)
        throw Error(Errc::InvalidConfig, "resync_threshold must be at least 1");
      if (privAllow & ~0xf)
        throw Error(Errc::InvalidConfig, "priv_allow holds levels 0..3 only");
      for (const auto& r : addrRanges)
        if (r.lo >= r.hi or (r.lo & 1) or (r.hi & 1))
          throw Error(Errc::InvalidConfig, "bad address range " + detail::hex(r.lo) + "-" + detail::hex(r.hi));
    }
  };

  /// Set one config key from its text value. Keys: enabled, lanes,
  /// priv_allow (e.g. "0,3"), addr_ranges ("0x1000-0x2000;0x8000-0x9000"),
  /// resync_mode (packet|cycle), resync_threshold.
  inline void setConfigKey(EncoderConfig& config, std::string_view key, std::string_view value)
  {
    auto bad = [&] {
      return Error(Errc::InvalidConfig, std::string(key) + "=" + std::string(value));
    };
    value = detail::trim(value);
    if (key == "enabled")
      {
        if (value == "1" or value == "true")
          config.enabled = true;
        else if (value == "0" or value == "false")
          config.enabled = false;
        else
          throw bad();
      }
    else if (key == "lanes")
      {
        if (not detail::parseDec(value, config.lanes))
          throw bad();
      }
    else if (key == "priv_allow")
      {
        config.privAllow = 0;
        if (value.empty())
          return;
        for (auto item : detail::splitCommas(value))
          {
            unsigned p = 0;
            if (not detail::parseDec(item, p) or p > 3)
              throw bad();
            config.privAllow |= uint8_t(1u << p);
          }
      }
    else if (key == "addr_ranges")
      {
        config.addrRanges.clear();
        while (not value.empty())
          {
            auto semi = value.find(';');
            auto item = detail::trim(value.substr(0, semi));
            value = semi == std::string_view::npos ? std::string_view{} : value.substr(semi + 1);
            if (item.empty())
              continue;
            auto dash = item.find('-');
            AddrRange r;
            if (dash == std::string_view::npos
                or not detail::parseNumber(detail::trim(item.substr(0, dash)), r.lo)
                or not detail::parseNumber(detail::trim(item.substr(dash + 1)), r.hi))
              throw bad();
            config.addrRanges.push_back(r);
          }
      }
    else if (key == "resync_mode")
      {
        if (value == "packet" or value == "packets")
          config.resyncMode = ResyncMode::PacketCount;
        else if (value == "cycle" or value == "cycles")
          config.resyncMode = ResyncMode::CycleCount;
        else
          throw bad();
      }
    else if (key == "resync_threshold")
      {
        if (not detail::parseDec(value, config.resyncThreshold))
          throw bad();
      }
    else
      throw Error(Errc::InvalidConfig, "unknown key '" + std::string(key) + "'");
  }

  /// Parse a flat key=value config file; unspecified keys keep defaults.
  inline EncoderConfig parseEncoderConfig(std::string_view text)
  {
    EncoderConfig config;
    detail::forEachLine(text, [&](size_t lineNo, std::string_view line) {
      auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw Error(Errc::InvalidConfig, "line " + std::to_string(lineNo), lineNo);
      setConfigKey(config, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    });
    config.validate();
    return config;
  }

  inline std::string formatEncoderConfig(const EncoderConfig& c)
  {
    std::string out;
    out += "enabled=" + std::string(c.enabled ? "1" : "0") + "\n";
    out += "lanes=" + std::to_string(c.lanes) + "\n";
    out += "priv_allow=";
    bool first = true;
    for (unsigned p = 0; p < 4; ++p)
      if (c.privAllow & (1u << p))
        {
          out += (first ? "" : ",") + std::to_string(p);
          first = false;
        }
    out += "\naddr_ranges=";
    for (size_t i = 0; i < c.addrRanges.size(); ++i)
      out += (i ? ";" : "") + detail::hex(c.addrRanges[i].lo) + "-" + detail::hex(c.addrRanges[i].hi);
    out += "\nresync_mode=" + std::string(c.resyncMode == ResyncMode::PacketCount ? "packet" : "cycle");
    out += "\nresync_threshold=" + std::to_string(c.resyncThreshold) + "\n";
    return out;
  }

  /// Filter: is this block traced under the configuration?
  inline bool qualify(const RetirementBlock& b, const EncoderConfig& config)
  {
    if (not config.enabled or not (config.privAllow & (1u << b.priv)))
      return false;
    if (config.addrRanges.empty())
      return true;
    return std::any_of(config.addrRanges.begin(), config.addrRanges.end(),
                       [&](const AddrRange& r) { return b.iaddr >= r.lo and b.iaddr < r.hi; });
  }

  // ---------------------------------------------------------------------
  // Branch map and resync counter.

  struct BranchMapState
  {
    uint32_t bits = 0;   // Slot i holds the i-th oldest outcome; 1 = not taken.
    uint8_t count = 0;

    bool full() const
    { return count == kMaxBranches; }

    bool operator==(const BranchMapState&) const = default;
  };

  inline BranchMapState recordBranch(BranchMapState map, bool taken)
  {
    if (map.full())
      throw Error(Errc::MapFull, "branch map holds 31 outcomes");
    if (not taken)
      map.bits |= 1u << map.count;
    ++map.count;
    return map;
  }

  enum class ResyncEvent : uint8_t
  { PacketEmitted, CycleElapsed };

  struct ResyncState
  {
    uint64_t counter = 0;
    bool pending = false;

    bool operator==(const ResyncState&) const = default;
  };

  /// Count one event if it matches the mode; flag a resync at threshold.
  inline ResyncState resyncTick(ResyncState s, ResyncMode mode, uint64_t threshold, ResyncEvent ev,
                                uint64_t amount = 1)
  {
    bool counts = (mode == ResyncMode::PacketCount and ev == ResyncEvent::PacketEmitted)
      or (mode == ResyncMode::CycleCount and ev == ResyncEvent::CycleElapsed);
    if (counts)
      s.counter += amount;
    if (s.counter >= threshold)
      s.pending = true;
    return s;
  }

  // ---------------------------------------------------------------------
  // Encoder.

  enum class PacketRequest : uint8_t
  {
    NoPacket,
    SyncStart,
    ResyncClose,
    Trap,
    FullBranchMap,
    AddressReport,
    SupportEnd,
  };

  /// Worst-case packets a single block may add outside sync packets, plus
  /// one for closing the run. Packet-count resync fires this much early
  /// so that no more than resync_threshold packets separate two syncs.
  constexpr uint64_t kResyncReserve = 2;

  struct EncoderState
  {
    EncoderConfig config;
    std::deque<std::vector<RetirementBlock>> window;   // Cycles awaiting a decision.
    std::vector<RetirementBlock> previous;             // Last decided cycle.
    std::optional<uint64_t> lastCycle;
    bool started = false;
    uint64_t lastReportedAddr = 0;
    BranchMapState branchMap;
    ResyncState resync;

    // Instructions retired since the decoder's last resolution point, and
    // the address of the newest of them.
    bool unresolved = false;
    uint64_t lastRetiredAddr = 0;

    // The newest packet is an address report naming a resume address.
    bool resumeReportLast = false;

    // Loss recovery: emit TraceLost at the next qualified block, then
    // resynchronise on a later cycle.
    bool lostPending = false;
    std::optional<uint64_t> skipCycle;

    uint64_t blocksPushed = 0;
    uint64_t blocksDecided = 0;
  };

  /// The highest-priority request for a qualified block. `next` is the
  /// following block when it is known.
  inline PacketRequest priorityDecide(const EncoderState& state, const RetirementBlock& block,
                                      const std::optional<RetirementBlock>& next)
  {
    if (not state.started)
      return PacketRequest::SyncStart;
    if (state.resync.pending)
      return PacketRequest::ResyncClose;
    if (isTrap(block.itype))
      return PacketRequest::Trap;
    if (state.branchMap.full())
      return PacketRequest::FullBranchMap;
    if (isUninferable(block.itype))
      return PacketRequest::AddressReport;
    if (next and not qualify(*next, state.config))
      return PacketRequest::SupportEnd;
    return PacketRequest::NoPacket;
  }

  /// Software trace encoder. Feed one cycle at a time with step(); each
  /// cycle is decided once its successor cycle has arrived, so packets
  /// lag input by one cycle. flush() drains and closes the trace.
  class Encoder
  {
  public:
    explicit Encoder(EncoderConfig config = {})
    {
      config.validate();
      state_.config = std::move(config);
    }

    const EncoderState& state() const
    { return state_; }

    const EncoderConfig& config() const
    { return state_.config; }

    /// Global block index (push order) of each SyncStart emitted so far.
    const std::vector<uint64_t>& syncOrigins() const
    { return syncOrigins_; }

    /// Push all blocks retired in one cycle, in lane order.
    std::vector<TracePacket> step(std::span<const RetirementBlock> cycleBlocks)
    {
      std::vector<TracePacket> out;
      if (cycleBlocks.empty())
        return out;

      uint64_t cycle = cycleBlocks.front().cycle;
      for (size_t i = 0; i < cycleBlocks.size(); ++i)
        {
          const auto& b = cycleBlocks[i];
          if (b.cycle != cycle)
            throw Error(Errc::InvariantViolation, "blocks of one step must share a cycle", b.cycle);
          if (b.lane >= state_.config.lanes)
            throw Error(Errc::InvariantViolation, "lane " + std::to_string(b.lane) + " beyond configured lanes",
                        b.cycle);
          if (i > 0 and b.lane <= cycleBlocks[i - 1].lane)
            throw Error(Errc::InvariantViolation, "lanes must be strictly ascending", b.cycle);
          if (auto why = checkBlock(b))
            throw Error(Errc::InvariantViolation, *why, b.cycle);
        }
      if (state_.lastCycle and cycle <= *state_.lastCycle)
        throw Error(Errc::NonMonotonicCycle, "cycle " + std::to_string(cycle), cycle);

      uint64_t elapsed = state_.lastCycle ? cycle - *state_.lastCycle : 1;
      state_.lastCycle = cycle;
      state_.resync = resyncTick(state_.resync, state_.config.resyncMode, threshold(),
                                 ResyncEvent::CycleElapsed, elapsed);

      state_.window.emplace_back(cycleBlocks.begin(), cycleBlocks.end());
      state_.blocksPushed += cycleBlocks.size();

      while (state_.window.size() >= 2)
        decideFront(out, &state_.window[1].front());
      return out;
    }

    /// Drain the window and close the trace.
    std::vector<TracePacket> flush()
    {
      std::vector<TracePacket> out;
      while (not state_.window.empty())
        decideFront(out, state_.window.size() >= 2 ? &state_.window[1].front() : nullptr);
      if (state_.started)
        endRun(out);
      if (state_.lostPending)
        {
          emit(out, Support{state_.config.enabled, QualStatus::TraceLost});
          state_.lostPending = false;
        }
      return out;
    }

    /// Report that a packet emitted earlier was dropped downstream. The
    /// encoder abandons its run and restarts with TraceLost + SyncStart.
    void notifyLoss()
    {
      state_.started = false;
      state_.branchMap = {};
      state_.unresolved = false;
      state_.lostPending = true;
    }

  private:
    uint64_t threshold() const
    {
      uint64_t r = state_.config.resyncThreshold;
      if (state_.config.resyncMode == ResyncMode::PacketCount)
        return r > kResyncReserve + 1 ? r - kResyncReserve : 1;
      return r;
    }

    void emit(std::vector<TracePacket>& out, TracePacket packet)
    {
      bool sync = std::holds_alternative<SyncStart>(packet);
      if (carriesAddress(packet))
        state_.lastReportedAddr = addressOf(packet);
      out.push_back(std::move(packet));
      state_.resumeReportLast = false;
      if (sync)
        state_.resync = {};
      else
        state_.resync = resyncTick(state_.resync, state_.config.resyncMode, threshold(),
                                   ResyncEvent::PacketEmitted);
    }

    uint64_t addressOf(const TracePacket& p) const
    {
      if (auto s = std::get_if<SyncStart>(&p))
        return s->address;
      if (auto t = std::get_if<Trap>(&p))
        return t->handlerAddress;
      if (auto a = std::get_if<AddrOnly>(&p))
        return state_.lastReportedAddr + static_cast<uint64_t>(a->delta);
      return state_.lastReportedAddr + static_cast<uint64_t>(std::get<BranchMapPkt>(p).delta);
    }

    /// Branch-map packet if outcomes are queued, else an address-only one.
    /// The address is where execution resumes, unless the report is
    /// immediately followed by Support(EndedReported), in which case it is
    /// the last retired instruction.
    void emitReport(std::vector<TracePacket>& out, uint64_t address, bool resume)
    {
      int64_t delta = static_cast<int64_t>(address - state_.lastReportedAddr);
      if (state_.branchMap.count > 0)
        emit(out, BranchMapPkt{state_.branchMap.count, state_.branchMap.bits, delta});
      else
        emit(out, AddrOnly{delta});
      state_.branchMap = {};
      state_.unresolved = false;
      state_.resumeReportLast = resume;
    }

    void emitFullMap(std::vector<TracePacket>& out)
    {
      emit(out, BranchMapPkt{state_.branchMap.count, state_.branchMap.bits, 0});
      state_.branchMap = {};
      state_.unresolved = false;
    }

    /// Tell the decoder where the current run pauses, if any instruction
    /// has retired since it last resolved.
    void closeRun(std::vector<TracePacket>& out, uint64_t resumeAddr)
    {
      if (state_.unresolved)
        emitReport(out, resumeAddr, true);
    }

    void endRun(std::vector<TracePacket>& out)
    {
      if (state_.unresolved)
        emitReport(out, state_.lastRetiredAddr, false);
      else if (state_.resumeReportLast)
        emit(out, Support{state_.config.enabled, QualStatus::NoChange});
      emit(out, Support{state_.config.enabled, QualStatus::EndedReported});
      state_.started = false;
    }

    void emitSync(std::vector<TracePacket>& out, const RetirementBlock& b, uint64_t blockIndex)
    {
      emit(out, SyncStart{b.priv, b.iaddr});
      syncOrigins_.push_back(blockIndex);
      state_.started = true;
      state_.branchMap = {};
      state_.unresolved = false;
    }

    void decideFront(std::vector<TracePacket>& out, const RetirementBlock* following)
    {
      auto cycle = std::move(state_.window.front());
      state_.window.pop_front();
      for (size_t i = 0; i < cycle.size(); ++i)
        {
          const RetirementBlock* next = i + 1 < cycle.size() ? &cycle[i + 1] : following;
          decideBlock(out, cycle[i], next, state_.blocksDecided++);
        }
      state_.previous = std::move(cycle);
    }

    void decideBlock(std::vector<TracePacket>& out, const RetirementBlock& b,
                     const RetirementBlock* next, uint64_t blockIndex)
    {
      const auto& config = state_.config;
      if (not qualify(b, config))
        return;
      if (state_.lostPending)
        {
          emit(out, Support{config.enabled, QualStatus::TraceLost});
          state_.lostPending = false;
          state_.skipCycle = b.cycle;
          return;
        }
      if (state_.skipCycle and *state_.skipCycle == b.cycle)
        return;
      state_.skipCycle.reset();

      std::optional<RetirementBlock> nextOpt;
      if (next)
        nextOpt = *next;
      bool closing = not next or not qualify(*next, config);

      while (true)
        {
          switch (priorityDecide(state_, b, nextOpt))
            {
            case PacketRequest::SyncStart:
              emitSync(out, b, blockIndex);
              continue;
            case PacketRequest::ResyncClose:
              closeRun(out, b.iaddr);
              emitSync(out, b, blockIndex);
              continue;
            case PacketRequest::FullBranchMap:
              emitFullMap(out);
              continue;
            case PacketRequest::Trap:
              if (b.iretire > 0)
                {
                  state_.unresolved = true;
                  state_.lastRetiredAddr = b.lastAddr();
                }
              if (closing)
                {
                  endRun(out);
                  return;
                }
              closeRun(out, b.endAddr());
              emit(out, Trap{b.itype == IType::Interrupt, next->priv, b.cause, b.tval, next->iaddr});
              return;
            default:
              break;
            }
          break;
        }

      state_.unresolved = true;
      state_.lastRetiredAddr = b.lastAddr();
      if (isBranch(b.itype))
        {
          state_.branchMap = recordBranch(state_.branchMap, b.itype == IType::BranchTaken);
          if (state_.branchMap.full())
            emitFullMap(out);
        }
      if (isUninferable(b.itype))
        emitReport(out, closing ? b.lastAddr() : next->iaddr, not closing);
      if (closing)
        endRun(out);
    }

    EncoderState state_;
    std::vector<uint64_t> syncOrigins_;
  };

  /// Group a flat, cycle-ordered block list into per-cycle spans and run
  /// them through an encoder. Returns every packet including the flush.
  inline std::vector<TracePacket> encodeStream(Encoder& encoder, std::span<const RetirementBlock> blocks)
  {
    std::vector<TracePacket> out;
    size_t i = 0;
    while (i < blocks.size())
      {
        size_t j = i + 1;
        while (j < blocks.size() and blocks[j].cycle == blocks[i].cycle)
          ++j;
        auto pkts = encoder.step(blocks.subspan(i, j - i));
        out.insert(out.end(), pkts.begin(), pkts.end());
        i = j;
      }
    auto tail = encoder.flush();
    out.insert(out.end(), tail.begin(), tail.end());
    return out;
  }

  inline std::vector<TracePacket> encodeStream(const EncoderConfig& config,
                                               std::span<const RetirementBlock> blocks)
  {
    Encoder encoder(config);
    return encodeStream(encoder, blocks);
  }

}
