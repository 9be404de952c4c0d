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

#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "etrace/error.hpp"

namespace etrace
{

  /// Type of the last instruction of a retirement block (3-bit code).
  enum class IType : uint8_t
  {
    None = 0,
    Exception = 1,
    Interrupt = 2,
    TrapReturn = 3,
    BranchNotTaken = 4,
    BranchTaken = 5,
    UninferableJump = 6,
    InferableJump = 7,
  };

  constexpr bool isTrap(IType t)
  { return t == IType::Exception or t == IType::Interrupt; }

  constexpr bool isBranch(IType t)
  { return t == IType::BranchTaken or t == IType::BranchNotTaken; }

  /// Blocks ending in these need their successor address reported.
  constexpr bool isUninferable(IType t)
  { return t == IType::UninferableJump or t == IType::TrapReturn; }

  /// One block of retired instructions on one lane in one cycle. Sizes
  /// are counted in 16-bit halfwords.
  struct RetirementBlock
  {
    uint64_t cycle = 0;
    uint32_t lane = 0;
    uint64_t iaddr = 0;
    uint32_t iretire = 0;
    uint32_t ilastsize = 2;
    IType itype = IType::None;
    uint8_t priv = 3;
    uint16_t cause = 0;
    uint64_t tval = 0;

    bool operator==(const RetirementBlock&) const = default;

    /// Address of the final retired instruction. Only meaningful when
    /// iretire > 0.
    uint64_t lastAddr() const
    { return iaddr + 2 * uint64_t(iretire - ilastsize); }

    /// Address following the last retired instruction in sequence.
    uint64_t endAddr() const
    { return iaddr + 2 * uint64_t(iretire); }
  };

  /// Returns a description of the first broken block invariant, if any.
  inline std::optional<std::string> checkBlock(const RetirementBlock& b)
  {
    if (static_cast<unsigned>(b.itype) > 7)
      return "itype out of range";
    if (b.iaddr & 1)
      return "iaddr not halfword-aligned";
    if (b.ilastsize != 1 and b.ilastsize != 2)
      return "ilastsize must be 1 or 2";
    if (b.iretire == 0 and not isTrap(b.itype))
      return "iretire is zero on a non-trap block";
    if (b.iretire != 0 and b.ilastsize > b.iretire)
      return "ilastsize exceeds iretire";
    if (b.priv > 3)
      return "priv out of range";
    if (not isTrap(b.itype) and (b.cause != 0 or b.tval != 0))
      return "cause/tval set on a non-trap block";
    return std::nullopt;
  }

  namespace detail
  {
    inline std::string_view trim(std::string_view s)
    {
      while (not s.empty() and (s.front() == ' ' or s.front() == '\t' or s.front() == '\r'))
        s.remove_prefix(1);
      while (not s.empty() and (s.back() == ' ' or s.back() == '\t' or s.back() == '\r'))
        s.remove_suffix(1);
      return s;
    }

    inline std::string_view stripComment(std::string_view line)
    {
      auto pos = line.find('#');
      if (pos != std::string_view::npos)
        line = line.substr(0, pos);
      return trim(line);
    }

    inline std::vector<std::string_view> splitCommas(std::string_view s)
    {
      std::vector<std::string_view> out;
      size_t start = 0;
      while (true)
        {
          auto pos = s.find(',', start);
          out.push_back(trim(s.substr(start, pos - start)));
          if (pos == std::string_view::npos)
            break;
          start = pos + 1;
        }
      return out;
    }

    /// Parse "0x..." hex into value. Returns false on any junk.
    inline bool parseHex(std::string_view s, uint64_t& value)
    {
      if (s.size() < 3 or s[0] != '0' or (s[1] != 'x' and s[1] != 'X'))
        return false;
      auto first = s.data() + 2, last = s.data() + s.size();
      auto [ptr, ec] = std::from_chars(first, last, value, 16);
      return ec == std::errc() and ptr == last;
    }

    template <typename T>
    bool parseDec(std::string_view s, T& value)
    {
      if (s.empty())
        return false;
      auto last = s.data() + s.size();
      auto [ptr, ec] = std::from_chars(s.data(), last, value, 10);
      return ec == std::errc() and ptr == last;
    }

    /// Accept either 0x-prefixed hex or decimal.
    inline bool parseNumber(std::string_view s, uint64_t& value)
    {
      if (s.size() > 2 and s[0] == '0' and (s[1] == 'x' or s[1] == 'X'))
        return parseHex(s, value);
      return parseDec(s, value);
    }

    inline std::string hex(uint64_t v)
    {
      char buf[24] = "0x";
      auto [ptr, ec] = std::to_chars(buf + 2, buf + sizeof(buf), v, 16);
      return std::string(buf, ptr);
    }

    /// Calls fn(lineNumber, content) for every non-blank, comment-stripped line.
    template <typename Fn>
    void forEachLine(std::string_view text, Fn&& fn)
    {
      size_t lineNo = 0, start = 0;
      while (start <= text.size())
        {
          auto pos = text.find('\n', start);
          auto line = text.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start);
          ++lineNo;
          auto content = stripComment(line);
          if (not content.empty())
            fn(lineNo, content);
          if (pos == std::string_view::npos)
            break;
          start = pos + 1;
        }
    }
  }

  /// Parse a retirement log: one `cycle,lane,iaddr,iretire,ilastsize,
  /// itype,priv,cause,tval` record per line, `#` comments. Blocks of one
  /// cycle come back sorted by lane.
  inline std::vector<RetirementBlock> parseRetirementLog(std::string_view text)
  {
    std::vector<RetirementBlock> blocks;
    size_t cycleStart = 0;
    bool haveCycle = false;

    detail::forEachLine(text, [&](size_t lineNo, std::string_view line) {
      auto f = detail::splitCommas(line);
      RetirementBlock b;
      unsigned itype = 0, priv = 0;
      if (f.size() != 9
          or not detail::parseDec(f[0], b.cycle)
          or not detail::parseDec(f[1], b.lane)
          or not detail::parseNumber(f[2], b.iaddr)
          or not detail::parseDec(f[3], b.iretire)
          or not detail::parseDec(f[4], b.ilastsize)
          or not detail::parseDec(f[5], itype)
          or not detail::parseDec(f[6], priv)
          or not detail::parseDec(f[7], b.cause)
          or not detail::parseNumber(f[8], b.tval))
        throw Error(Errc::MalformedLine, "line " + std::to_string(lineNo), lineNo);
      if (itype > 7)
        throw Error(Errc::InvariantViolation,
                    "line " + std::to_string(lineNo) + ": itype code " + std::to_string(itype), lineNo);
      if (priv > 3)
        throw Error(Errc::InvariantViolation,
                    "line " + std::to_string(lineNo) + ": priv out of range", lineNo);
      b.itype = static_cast<IType>(itype);
      b.priv = static_cast<uint8_t>(priv);
      if (auto why = checkBlock(b))
        throw Error(Errc::InvariantViolation, "line " + std::to_string(lineNo) + ": " + *why, lineNo);

      if (haveCycle and b.cycle < blocks.back().cycle)
        throw Error(Errc::NonMonotonicCycle, "line " + std::to_string(lineNo), lineNo);
      if (not haveCycle or b.cycle != blocks.back().cycle)
        cycleStart = blocks.size();
      haveCycle = true;

      // Insert in lane order within the current cycle.
      auto pos = blocks.end();
      for (size_t i = cycleStart; i < blocks.size(); ++i)
        {
          if (blocks[i].lane == b.lane)
            throw Error(Errc::InvariantViolation,
                        "line " + std::to_string(lineNo) + ": duplicate lane in cycle", lineNo);
          if (blocks[i].lane > b.lane and pos == blocks.end())
            pos = blocks.begin() + i;
        }
      blocks.insert(pos, b);
    });
    return blocks;
  }

  inline std::string formatBlock(const RetirementBlock& b)
  {
    std::string s;
    s += std::to_string(b.cycle) + ',' + std::to_string(b.lane) + ',' + detail::hex(b.iaddr) + ',';
    s += std::to_string(b.iretire) + ',' + std::to_string(b.ilastsize) + ',';
    s += std::to_string(static_cast<unsigned>(b.itype)) + ',' + std::to_string(unsigned(b.priv)) + ',';
    s += std::to_string(b.cause) + ',' + detail::hex(b.tval);
    return s;
  }

  /// Canonical text form; parseRetirementLog(formatRetirementLog(x)) == x.
  inline std::string formatRetirementLog(std::span<const RetirementBlock> blocks)
  {
    std::string out;
    for (const auto& b : blocks)
      out += formatBlock(b) + '\n';
    return out;
  }

  // ---------------------------------------------------------------------
  // Static program image.

  enum class InstructionKind : uint8_t
  {
    Sequential,
    Branch,
    InferableJump,
    UninferableJump,
    Call,
    UninferableCall,
    Return,
    TrapReturn,
  };

  constexpr bool hasTarget(InstructionKind k)
  {
    return k == InstructionKind::Branch or k == InstructionKind::InferableJump
      or k == InstructionKind::Call;
  }

  /// Kinds whose successor cannot be computed from the image.
  constexpr bool isUninferable(InstructionKind k)
  {
    return k == InstructionKind::UninferableJump or k == InstructionKind::UninferableCall
      or k == InstructionKind::Return or k == InstructionKind::TrapReturn;
  }

  inline const char* kindMnemonic(InstructionKind k)
  {
    switch (k)
      {
      case InstructionKind::Sequential:      return "seq";
      case InstructionKind::Branch:          return "br";
      case InstructionKind::InferableJump:   return "jal";
      case InstructionKind::UninferableJump: return "jalr";
      case InstructionKind::Call:            return "call";
      case InstructionKind::UninferableCall: return "callr";
      case InstructionKind::Return:          return "ret";
      case InstructionKind::TrapReturn:      return "mret";
      }
    return "?";
  }

  inline std::optional<InstructionKind> kindFromMnemonic(std::string_view s)
  {
    for (unsigned i = 0; i <= unsigned(InstructionKind::TrapReturn); ++i)
      {
        auto k = static_cast<InstructionKind>(i);
        if (s == kindMnemonic(k))
          return k;
      }
    return std::nullopt;
  }

  struct Instruction
  {
    uint8_t sizeBytes = 4;
    InstructionKind kind = InstructionKind::Sequential;
    uint64_t target = 0;   // Valid when hasTarget(kind).

    bool operator==(const Instruction&) const = default;
  };

  /// Address-ordered, non-overlapping instruction image plus entry point.
  class InstructionMap
  {
  public:
    using Entries = std::map<uint64_t, Instruction>;

    InstructionMap() = default;

    explicit InstructionMap(uint64_t entry)
      : entry_(entry)
    { }

    uint64_t entry() const
    { return entry_; }

    void setEntry(uint64_t entry)
    { entry_ = entry; }

    /// Insert an instruction, rejecting misalignment and overlap.
    void add(uint64_t addr, Instruction inst)
    {
      if (addr & 1)
        throw Error(Errc::InvariantViolation, "misaligned address " + detail::hex(addr), addr);
      if (inst.sizeBytes != 2 and inst.sizeBytes != 4)
        throw Error(Errc::InvariantViolation, "bad size at " + detail::hex(addr), addr);
      if (hasTarget(inst.kind) and (inst.target & 1))
        throw Error(Errc::InvariantViolation, "misaligned target at " + detail::hex(addr), addr);

      auto next = entries_.lower_bound(addr);
      if (next != entries_.end() and next->first < addr + inst.sizeBytes)
        throw Error(Errc::OverlappingEntries, detail::hex(next->first), next->first);
      if (next != entries_.begin())
        {
          auto prev = std::prev(next);
          if (prev->first + prev->second.sizeBytes > addr)
            throw Error(Errc::OverlappingEntries, detail::hex(addr), addr);
        }
      entries_.emplace_hint(next, addr, inst);
    }

    const Instruction* find(uint64_t addr) const
    {
      auto it = entries_.find(addr);
      return it == entries_.end() ? nullptr : &it->second;
    }

    bool contains(uint64_t addr) const
    { return entries_.contains(addr); }

    size_t size() const
    { return entries_.size(); }

    bool empty() const
    { return entries_.empty(); }

    const Entries& entries() const
    { return entries_; }

    /// Targets that fall inside [first, last+size) must name an entry.
    void checkTargets() const
    {
      if (entries_.empty())
        return;
      uint64_t lo = entries_.begin()->first;
      uint64_t hi = entries_.rbegin()->first + entries_.rbegin()->second.sizeBytes;
      for (const auto& [addr, inst] : entries_)
        if (hasTarget(inst.kind) and inst.target >= lo and inst.target < hi
            and not entries_.contains(inst.target))
          throw Error(Errc::InvariantViolation,
                      "target " + detail::hex(inst.target) + " of " + detail::hex(addr)
                      + " is not an instruction boundary", addr);
    }

  private:
    Entries entries_;
    uint64_t entry_ = 0;
  };

  /// Parse `entry,<addr>` followed by `addr,size,kind[,target]` lines.
  inline InstructionMap parseInstructionMap(std::string_view text)
  {
    InstructionMap map;
    bool sawEntry = false;

    detail::forEachLine(text, [&](size_t lineNo, std::string_view line) {
      auto f = detail::splitCommas(line);
      auto bad = [&] { return Error(Errc::MalformedLine, "line " + std::to_string(lineNo), lineNo); };

      if (f[0] == "entry")
        {
          uint64_t entry = 0;
          if (f.size() != 2 or not detail::parseNumber(f[1], entry))
            throw bad();
          map.setEntry(entry);
          sawEntry = true;
          return;
        }

      uint64_t addr = 0;
      unsigned size = 0;
      if (f.size() < 3 or f.size() > 4 or not detail::parseNumber(f[0], addr)
          or not detail::parseDec(f[1], size))
        throw bad();
      auto kind = kindFromMnemonic(f[2]);
      if (not kind)
        throw Error(Errc::UnknownKind, "line " + std::to_string(lineNo) + ": '" + std::string(f[2]) + "'",
                    lineNo);

      Instruction inst{static_cast<uint8_t>(size), *kind, 0};
      if (hasTarget(*kind))
        {
          if (f.size() != 4)
            throw Error(Errc::MissingTarget, detail::hex(addr), addr);
          if (not detail::parseNumber(f[3], inst.target))
            throw bad();
        }
      else if (f.size() != 3)
        throw bad();
      map.add(addr, inst);
    });

    if (not sawEntry and not map.empty())
      map.setEntry(map.entries().begin()->first);
    map.checkTargets();
    return map;
  }

  inline std::string formatInstructionMap(const InstructionMap& map)
  {
    std::string out = "entry," + detail::hex(map.entry()) + '\n';
    for (const auto& [addr, inst] : map.entries())
      {
        out += detail::hex(addr) + ',' + std::to_string(unsigned(inst.sizeBytes)) + ',' + kindMnemonic(inst.kind);
        if (hasTarget(inst.kind))
          out += ',' + detail::hex(inst.target);
        out += '\n';
      }
    return out;
  }

  /// itype for a block whose final instruction has the given kind.
  constexpr IType itypeFor(InstructionKind k, bool branchTaken)
  {
    switch (k)
      {
      case InstructionKind::Sequential:      return IType::None;
      case InstructionKind::Branch:          return branchTaken ? IType::BranchTaken : IType::BranchNotTaken;
      case InstructionKind::InferableJump:
      case InstructionKind::Call:            return IType::InferableJump;
      case InstructionKind::UninferableJump:
      case InstructionKind::UninferableCall:
      case InstructionKind::Return:          return IType::UninferableJump;
      case InstructionKind::TrapReturn:      return IType::TrapReturn;
      }
    return IType::None;
  }

  struct BlockShape
  {
    uint32_t iretire = 0;
    uint32_t ilastsize = 0;
    IType itype = IType::None;

    bool operator==(const BlockShape&) const = default;
  };

  /// Summarise `count` instructions starting at `start`. Only the last
  /// may be a control-flow instruction.
  inline BlockShape blockFromWalk(const InstructionMap& map, uint64_t start, size_t count,
                                  bool branchTaken = false)
  {
    BlockShape shape;
    uint64_t pc = start;
    for (size_t i = 0; i < count; ++i)
      {
        const Instruction* inst = map.find(pc);
        if (not inst)
          throw Error(Errc::UnknownAddress, detail::hex(pc), pc);
        bool last = i + 1 == count;
        if (not last and inst->kind != InstructionKind::Sequential)
          throw Error(Errc::NonSequentialInterior, detail::hex(pc), pc);
        shape.iretire += inst->sizeBytes / 2;
        if (last)
          {
            shape.ilastsize = inst->sizeBytes / 2;
            shape.itype = itypeFor(inst->kind, branchTaken);
          }
        pc += inst->sizeBytes;
      }
    return shape;
  }

  /// Expand blocks into the program-counter sequence they retired,
  /// checking each block against the image. Appends to `out`.
  inline void appendRetiredPcs(const InstructionMap& map, const RetirementBlock& b,
                               std::vector<uint64_t>& out)
  {
    uint64_t pc = b.iaddr;
    uint32_t remaining = b.iretire;
    while (remaining > 0)
      {
        const Instruction* inst = map.find(pc);
        if (not inst)
          throw Error(Errc::UnknownAddress, detail::hex(pc), pc);
        uint32_t half = inst->sizeBytes / 2;
        if (half > remaining)
          throw Error(Errc::InvariantViolation, "block overruns instruction at " + detail::hex(pc), pc);
        remaining -= half;
        out.push_back(pc);
        if (remaining == 0)
          {
            if (half != b.ilastsize)
              throw Error(Errc::InvariantViolation, "ilastsize mismatch at " + detail::hex(pc), pc);
            if (not isTrap(b.itype))
              {
                IType want = itypeFor(inst->kind, b.itype == IType::BranchTaken);
                if (want != b.itype)
                  throw Error(Errc::InvariantViolation, "itype mismatch at " + detail::hex(pc), pc);
              }
            else if (inst->kind != InstructionKind::Sequential)
              throw Error(Errc::NonSequentialInterior, detail::hex(pc), pc);
          }
        else if (inst->kind != InstructionKind::Sequential)
          throw Error(Errc::NonSequentialInterior, detail::hex(pc), pc);
        pc += inst->sizeBytes;
      }
  }

  inline std::vector<uint64_t> retiredPcs(const InstructionMap& map,
                                          std::span<const RetirementBlock> blocks)
  {
    std::vector<uint64_t> out;
    for (const auto& b : blocks)
      appendRetiredPcs(map, b, out);
    return out;
  }

}
