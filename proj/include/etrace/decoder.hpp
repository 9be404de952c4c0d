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
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "etrace/error.hpp"
#include "etrace/instruction_model.hpp"
#include "etrace/packet.hpp"

namespace etrace
{

  /// Reconstruction state. `pc` is the next instruction the walker will
  /// emit once a packet tells it how far to go.
  struct DecoderState
  {
    uint64_t pc = 0;
    uint64_t lastReportedAddr = 0;
    uint64_t queueBits = 0;     // Pending branch outcomes, oldest in bit 0.
    unsigned queueLen = 0;
    bool active = false;
    bool traceLost = false;
  };

  struct DecodeReport
  {
    /// Where a synchronised segment starts in the PC output.
    struct Segment
    {
      size_t packetIndex = 0;
      uint64_t address = 0;
      size_t firstPc = 0;
    };

    uint64_t packets = 0;
    uint64_t pcs = 0;
    uint64_t syncs = 0;
    uint64_t traps = 0;
    uint64_t lossEvents = 0;
    uint64_t branchBitsDelivered = 0;
    uint64_t branchBitsConsumed = 0;
    uint64_t unconsumedBits = 0;
    std::vector<Segment> segments;

    /// Flat key=value text.
    std::string toText() const
    {
      std::string s;
      s += "packets=" + std::to_string(packets) + "\n";
      s += "pcs=" + std::to_string(pcs) + "\n";
      s += "syncs=" + std::to_string(syncs) + "\n";
      s += "traps=" + std::to_string(traps) + "\n";
      s += "loss_events=" + std::to_string(lossEvents) + "\n";
      s += "branch_bits_delivered=" + std::to_string(branchBitsDelivered) + "\n";
      s += "branch_bits_consumed=" + std::to_string(branchBitsConsumed) + "\n";
      s += "unconsumed_bits=" + std::to_string(unconsumedBits) + "\n";
      return s;
    }
  };

  /// Rebuilds the retired PC sequence from packets and the program image.
  ///
  /// The walker is lazy: it only emits instructions whose retirement a
  /// packet has confirmed. An address report (address-only or partial
  /// branch map) is held until the next packet arrives, then resolved:
  ///   - followed by Support(EndedReported), the address names the last
  ///     retired instruction: walk until it has been emitted with no
  ///     outcomes left;
  ///   - otherwise the address names where execution resumes: walk until
  ///     the pc reaches it with no outcomes left, or until an uninferable
  ///     instruction is emitted, which then continues at the address.
  /// A full branch map walks at once until its 31 outcomes are consumed.
  ///
  /// Either walk is ambiguous only when the path revisits the address
  /// through a cycle containing no conditional branch.
  class Decoder
  {
  public:
    explicit Decoder(const InstructionMap& map, uint64_t walkLimit = uint64_t(1) << 28)
      : map_(map), walkLimit_(walkLimit)
    { }

    const DecoderState& state() const
    { return state_; }

    const DecodeReport& report() const
    { return report_; }

    /// Apply one packet, appending confirmed PCs to out. Returns how many
    /// PCs were appended; these may belong to the previous packet.
    size_t apply(const TracePacket& packet, std::vector<uint64_t>& out)
    {
      size_t before = out.size();
      size_t index = report_.packets++;

      if (pending_)
        {
          auto held = *pending_;
          pending_.reset();
          auto sup = std::get_if<Support>(&packet);
          if (sup and sup->qual == QualStatus::TraceLost)
            ;
          else
            resolve(held, sup and sup->qual == QualStatus::EndedReported, out);
        }

      std::visit([&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SyncStart>)
          {
            state_ = DecoderState{};
            state_.active = true;
            state_.pc = p.address;
            state_.lastReportedAddr = p.address;
            requireMapped(p.address);
            ++report_.syncs;
            report_.segments.push_back({index, p.address, out.size()});
          }
        else if constexpr (std::is_same_v<T, Support>)
          {
            if (p.qual == QualStatus::TraceLost)
              {
                state_.traceLost = true;
                state_.active = false;
                dropQueue();
                ++report_.lossEvents;
              }
            else if (p.qual == QualStatus::EndedReported)
              {
                state_.active = false;
                dropQueue();
              }
          }
        else
          {
            if (not state_.active)
              {
                if (state_.traceLost)
                  return;
                throw Error(Errc::DesyncDetected, std::string(kindName(kindOf(packet)))
                            + " packet while not synchronised");
              }
            if constexpr (std::is_same_v<T, Trap>)
              {
                if (state_.queueLen != 0)
                  throw Error(Errc::DesyncDetected, "trap with unconsumed branch outcomes");
                state_.pc = p.handlerAddress;
                state_.lastReportedAddr = p.handlerAddress;
                requireMapped(p.handlerAddress);
                ++report_.traps;
              }
            else if constexpr (std::is_same_v<T, BranchMapPkt>)
              {
                if (p.full())
                  {
                    enqueue(p.bits, p.count);
                    walkFullMap(out);
                  }
                else
                  pending_ = packet;
              }
            else
              pending_ = packet;
          }
      }, packet);

      report_.pcs += out.size() - before;
      return out.size() - before;
    }

    /// Finish the stream: resolves a held report and records unconsumed
    /// outcomes in the report. Returns how many PCs were appended.
    size_t finish(std::vector<uint64_t>& out)
    {
      size_t before = out.size();
      if (pending_)
        {
          auto held = *pending_;
          pending_.reset();
          resolve(held, false, out);
        }
      report_.unconsumedBits = state_.queueLen;
      report_.pcs += out.size() - before;
      return out.size() - before;
    }

  private:
    void requireMapped(uint64_t addr) const
    {
      if (not map_.contains(addr))
        throw Error(Errc::UnknownAddress, detail::hex(addr), addr);
    }

    const Instruction& fetch(uint64_t addr) const
    {
      const Instruction* inst = map_.find(addr);
      if (not inst)
        throw Error(Errc::UnknownAddress, detail::hex(addr), addr);
      return *inst;
    }

    void enqueue(uint32_t bits, unsigned count)
    {
      if (state_.queueLen + count > 2 * kMaxBranches)
        throw Error(Errc::DesyncDetected, "branch outcome queue overflow");
      state_.queueBits |= uint64_t(bits) << state_.queueLen;
      state_.queueLen += count;
      report_.branchBitsDelivered += count;
    }

    void dropQueue()
    {
      state_.queueBits = 0;
      state_.queueLen = 0;
    }

    bool popTaken(uint64_t addr)
    {
      if (state_.queueLen == 0)
        throw Error(Errc::DesyncDetected, "branch at " + detail::hex(addr) + " without an outcome", addr);
      bool notTaken = state_.queueBits & 1;
      state_.queueBits >>= 1;
      --state_.queueLen;
      ++report_.branchBitsConsumed;
      return not notTaken;
    }

    /// Successor of a non-uninferable instruction, consuming an outcome
    /// for branches.
    uint64_t successor(uint64_t pc, const Instruction& inst)
    {
      switch (inst.kind)
        {
        case InstructionKind::Branch:
          return popTaken(pc) ? inst.target : pc + inst.sizeBytes;
        case InstructionKind::InferableJump:
        case InstructionKind::Call:
          return inst.target;
        default:
          return pc + inst.sizeBytes;
        }
    }

    void resolve(const TracePacket& held, bool lastRetired, std::vector<uint64_t>& out)
    {
      if (auto m = std::get_if<BranchMapPkt>(&held))
        {
          enqueue(m->bits, m->count);
          state_.lastReportedAddr += static_cast<uint64_t>(m->delta);
        }
      else
        state_.lastReportedAddr += static_cast<uint64_t>(std::get<AddrOnly>(held).delta);
      if (lastRetired)
        walkToLastRetired(state_.lastReportedAddr, out);
      else
        walkToResume(state_.lastReportedAddr, out);
    }

    void walkToResume(uint64_t target, std::vector<uint64_t>& out)
    {
      uint64_t pc = state_.pc;
      for (uint64_t steps = 0; ; ++steps)
        {
          if (steps >= walkLimit_)
            throw Error(Errc::DesyncDetected, "walk limit exceeded looking for " + detail::hex(target), target);
          if (steps > 0 and pc == target and state_.queueLen == 0)
            {
              state_.pc = pc;
              return;
            }
          const Instruction& inst = fetch(pc);
          out.push_back(pc);
          if (isUninferable(inst.kind))
            {
              if (state_.queueLen != 0)
                throw Error(Errc::DesyncDetected, "uninferable jump at " + detail::hex(pc)
                            + " with unconsumed branch outcomes", pc);
              requireMapped(target);
              state_.pc = target;
              return;
            }
          pc = successor(pc, inst);
        }
    }

    void walkToLastRetired(uint64_t target, std::vector<uint64_t>& out)
    {
      uint64_t pc = state_.pc;
      for (uint64_t steps = 0; ; ++steps)
        {
          if (steps >= walkLimit_)
            throw Error(Errc::DesyncDetected, "walk limit exceeded looking for " + detail::hex(target), target);
          const Instruction& inst = fetch(pc);
          out.push_back(pc);
          if (isUninferable(inst.kind))
            {
              if (pc == target and state_.queueLen == 0)
                {
                  state_.pc = pc;
                  return;
                }
              throw Error(Errc::DesyncDetected, "uninferable jump at " + detail::hex(pc)
                          + " before the last retired address " + detail::hex(target), pc);
            }
          uint64_t next = successor(pc, inst);
          if (pc == target and state_.queueLen == 0)
            {
              state_.pc = next;
              return;
            }
          pc = next;
        }
    }

    void walkFullMap(std::vector<uint64_t>& out)
    {
      uint64_t pc = state_.pc;
      for (uint64_t steps = 0; ; ++steps)
        {
          if (steps >= walkLimit_)
            throw Error(Errc::DesyncDetected, "walk limit exceeded consuming a branch map");
          const Instruction& inst = fetch(pc);
          out.push_back(pc);
          if (isUninferable(inst.kind))
            throw Error(Errc::DesyncDetected, "uninferable jump at " + detail::hex(pc)
                        + " inside a full branch map", pc);
          bool branch = inst.kind == InstructionKind::Branch;
          pc = successor(pc, inst);
          if (branch and state_.queueLen == 0)
            {
              state_.pc = pc;
              return;
            }
        }
    }

    const InstructionMap& map_;
    uint64_t walkLimit_;
    DecoderState state_;
    DecodeReport report_;
    std::optional<TracePacket> pending_;
  };

  struct DecodeResult
  {
    std::vector<uint64_t> pcs;
    DecodeReport report;
  };

  /// Fold a whole packet stream. Errors carry the failing packet index.
  inline DecodeResult decodeStream(std::span<const TracePacket> packets, const InstructionMap& map)
  {
    Decoder decoder(map);
    DecodeResult result;
    for (size_t i = 0; i < packets.size(); ++i)
      {
        try
          {
            decoder.apply(packets[i], result.pcs);
          }
        catch (const Error& e)
          {
            throw Error(e.code(), "packet " + std::to_string(i) + ": " + e.what(), i);
          }
      }
    try
      {
        decoder.finish(result.pcs);
      }
    catch (const Error& e)
      {
        throw Error(e.code(), "end of stream: " + std::string(e.what()), packets.size());
      }
    result.report = decoder.report();
    return result;
  }

}
