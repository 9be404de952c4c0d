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
#include <map>
#include <random>
#include <set>
#include <vector>

#include "etrace/error.hpp"
#include "etrace/instruction_model.hpp"

namespace etrace
{

  struct WorkloadParams
  {
    uint64_t seed = 1;
    uint64_t instructionCount = 1000;
    double branchDensity = 0.0;        // Share of retired instructions that are branches.
    double jumpDensity = 0.0;          // Share that are jumps, calls or returns.
    double uninferableFraction = 0.0;  // Share of jumps whose target is register-held.
    double trapRate = 0.0;             // Traps per 10^4 retired instructions.
    unsigned lanes = 1;
    double loopBias = 0.5;             // Probability a branch targets backwards.

    void validate() const
    {
      auto unit = [](double v) { return v >= 0.0 and v <= 1.0; };
      if (not unit(branchDensity) or not unit(jumpDensity) or not unit(uninferableFraction)
          or not unit(loopBias))
        throw Error(Errc::InfeasibleParams, "fractions must lie in [0, 1]");
      if (branchDensity + jumpDensity > 1.0)
        throw Error(Errc::InfeasibleParams, "branch and jump densities exceed 1");
      if (trapRate < 0.0 or trapRate > 10000.0)
        throw Error(Errc::InfeasibleParams, "trap rate must lie in [0, 10^4]");
      if (lanes == 0)
        throw Error(Errc::InfeasibleParams, "lanes must be at least 1");
    }
  };

  struct Workload
  {
    InstructionMap map;
    std::vector<RetirementBlock> blocks;
  };

  namespace detail
  {
    constexpr uint64_t kMainBase = 0x80000000;
    constexpr uint64_t kMainSize = 0x0f000000;
    constexpr uint64_t kHandlerBase = 0x8f000000;
    constexpr uint64_t kFunctionBase = 0x90000000;
    constexpr uint64_t kFunctionSize = 0x00100000;
    constexpr int kMaxFunctions = 12;
    constexpr unsigned kMaxBlockInstructions = 12;
    constexpr unsigned kForwardReach = 32;     // Halfwords.
    constexpr double kSteerHorizon = 200.0;    // Instructions.

    /// Executes a randomly generated program, materialising each
    /// instruction the first time control reaches it. Every backward edge
    /// is a conditional branch, so any cycle in the image holds a branch.
    class WorkloadBuilder
    {
    public:
      explicit WorkloadBuilder(const WorkloadParams& p)
        : p_(p), rng_(p.seed), map_(kMainBase)
      {
        buildHandler();
      }

      Workload run()
      {
        uint64_t pc = kMainBase;
        uint64_t& retired = retired_;
        bool inHandler = false;
        uint64_t epc = 0;
        std::vector<uint64_t> stack;

        while (retired < p_.instructionCount)
          {
            if (not inHandler and chance(p_.trapRate / 10000.0))
              {
                bool interrupt = chance(0.5);
                closeTrapBlock(pc, interrupt);
                epc = pc;
                inHandler = true;
                pc = kHandlerBase;
                continue;
              }

            const Instruction& inst = fetchOrGenerate(pc, stack.size());
            if (block_.count == 0)
              block_.start = pc;
            block_.halfwords += inst.sizeBytes / 2;
            block_.lastSize = inst.sizeBytes / 2;
            ++block_.count;
            ++retired;

            uint64_t next = pc + inst.sizeBytes;
            bool taken = false;
            if (inst.kind == InstructionKind::Branch)
              ++branches_;
            else if (inst.kind != InstructionKind::Sequential and not inHandler)
              ++jumps_;
            switch (inst.kind)
              {
              case InstructionKind::Sequential:
                break;
              case InstructionKind::Branch:
                taken = chance(inst.target < pc ? 0.85 : 0.5);
                if (taken)
                  next = inst.target;
                break;
              case InstructionKind::InferableJump:
                next = inst.target;
                break;
              case InstructionKind::Call:
                stack.push_back(pc + inst.sizeBytes);
                next = inst.target;
                break;
              case InstructionKind::UninferableCall:
                stack.push_back(pc + inst.sizeBytes);
                next = indirectTarget(pc);
                break;
              case InstructionKind::UninferableJump:
                next = indirectTarget(pc);
                break;
              case InstructionKind::Return:
                if (stack.empty())
                  throw Error(Errc::InvariantViolation, "return with empty call stack", pc);
                next = stack.back();
                stack.pop_back();
                break;
              case InstructionKind::TrapReturn:
                next = epc;
                inHandler = false;
                break;
              }

            if (inst.kind != InstructionKind::Sequential or block_.count >= blockCap_)
              closeBlock(itypeFor(inst.kind, taken));
            pc = next;
          }
        if (block_.count > 0)
          closeBlock(IType::None);

        fillDanglingTargets();
        assignCycles();
        return {std::move(map_), std::move(blocks_)};
      }

    private:
      struct OpenBlock
      {
        uint64_t start = 0;
        uint32_t halfwords = 0;
        uint32_t lastSize = 2;
        unsigned count = 0;
      };

      bool chance(double prob)
      { return std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < prob; }

      uint64_t uniform(uint64_t lo, uint64_t hi)
      { return std::uniform_int_distribution<uint64_t>(lo, hi)(rng_); }

      void buildHandler()
      {
        uint64_t a = kHandlerBase;
        for (int i = 0; i < 5; ++i, a += 4)
          map_.add(a, {4, InstructionKind::Sequential, 0});
        map_.add(a, {4, InstructionKind::TrapReturn, 0});
      }

      static uint64_t regionBase(uint64_t addr)
      {
        if (addr >= kFunctionBase)
          return kFunctionBase + (addr - kFunctionBase) / kFunctionSize * kFunctionSize;
        if (addr >= kHandlerBase)
          return kHandlerBase;
        return kMainBase;
      }

      static uint64_t regionLimit(uint64_t addr)
      {
        uint64_t base = regionBase(addr);
        if (base >= kFunctionBase)
          return base + kFunctionSize - 256;
        if (base == kHandlerBase)
          return base + 0x1000;
        return kMainBase + kMainSize - 256;
      }

      static int functionIndex(uint64_t addr)
      {
        if (addr < kFunctionBase)
          return -1;
        return static_cast<int>((addr - kFunctionBase) / kFunctionSize);
      }

      /// Start of the first instruction or reserved target at or after addr.
      uint64_t nextBoundary(uint64_t addr) const
      {
        uint64_t bound = UINT64_MAX;
        auto it = map_.entries().lower_bound(addr);
        if (it != map_.entries().end())
          bound = it->first;
        auto r = reserved_.lower_bound(addr);
        if (r != reserved_.end())
          bound = std::min(bound, *r);
        return bound;
      }

      /// A forward target at or after `from`; an instruction start or a
      /// free halfword that is then reserved. Zero when out of room.
      uint64_t claimForward(uint64_t from)
      {
        uint64_t t = from + 2 * uniform(0, kForwardReach);
        if (t >= regionLimit(from))
          return 0;
        auto it = map_.entries().upper_bound(t);
        if (it != map_.entries().begin())
          {
            auto prev = std::prev(it);
            if (prev->first <= t and t < prev->first + prev->second.sizeBytes)
              return prev->first;
          }
        reserved_.insert(t);
        return t;
      }

      /// Backward target: the instruction generated right after the most
      /// recent branch of the region, so a loop body holds exactly one
      /// branch and its mean length is 1/density.
      uint64_t claimBackward(uint64_t pc)
      {
        uint64_t base = regionBase(pc);
        const auto& order = regionOrder_[base];
        auto last = lastBranch_.find(base);
        size_t idx = last == lastBranch_.end() ? 0 : last->second + 1;
        if (idx >= order.size())
          return 0;
        uint64_t t = order[idx];
        return t < pc ? t : 0;
      }

      uint64_t indirectTarget(uint64_t pc)
      {
        auto& targets = indirect_[pc];
        uint64_t t = targets[uniform(0, targets.size() - 1)];
        if (not map_.contains(t))
          reserved_.insert(t);
        return t;
      }

      const Instruction& fetchOrGenerate(uint64_t pc, size_t depth)
      {
        if (auto inst = map_.find(pc))
          return *inst;

        Instruction inst;
        uint64_t bound = nextBoundary(pc + 1);
        inst.sizeBytes = (bound >= pc + 4 and chance(0.7)) ? 4 : 2;
        uint64_t end = pc + inst.sizeBytes;
        int fn = functionIndex(pc);
        bool nearLimit = end + 2 * kForwardReach + 8 >= regionLimit(pc);

        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
        double pBranch = steer(p_.branchDensity, branches_);
        double pJump = std::min(steer(p_.jumpDensity, jumps_), 1.0 - pBranch);
        if (fn >= 0 and (nearLimit or chance(1.0 / 40.0)))
          inst.kind = InstructionKind::Return;
        else if (nearLimit)
          inst.kind = InstructionKind::Sequential;
        else if (u < pBranch)
          {
            uint64_t t = chance(p_.loopBias) ? claimBackward(pc) : 0;
            if (t == 0)
              t = claimForward(end);
            if (t != 0)
              {
                inst.kind = InstructionKind::Branch;
                inst.target = t;
              }
          }
        else if (u < pBranch + pJump)
          makeJump(inst, pc, end, depth);

        map_.add(pc, inst);
        auto& order = regionOrder_[regionBase(pc)];
        order.push_back(pc);
        if (inst.kind == InstructionKind::Branch)
          lastBranch_[regionBase(pc)] = order.size() - 1;
        reserved_.erase(pc);
        return *map_.find(pc);
      }

      /// Probability for new code that pulls the executed share of a kind
      /// back toward its target, since loops replay old code unevenly.
      double steer(double target, uint64_t executed) const
      {
        if (target <= 0.0)
          return 0.0;
        double deficit = target * double(retired_) - double(executed);
        return std::clamp(target + deficit / kSteerHorizon, 0.0, 1.0);
      }

      void makeJump(Instruction& inst, uint64_t pc, uint64_t end, size_t depth)
      {
        bool uninferable = chance(p_.uninferableFraction);
        int fn = functionIndex(pc);
        bool canCall = fn + 1 < kMaxFunctions and depth < size_t(kMaxFunctions) and chance(0.5);
        if (canCall)
          {
            int callee = static_cast<int>(uniform(uint64_t(fn + 1), uint64_t(kMaxFunctions - 1)));
            uint64_t entry = kFunctionBase + uint64_t(callee) * kFunctionSize;
            if (uninferable)
              {
                inst.kind = InstructionKind::UninferableCall;
                indirect_[pc] = {entry};
              }
            else
              {
                inst.kind = InstructionKind::Call;
                inst.target = entry;
              }
            return;
          }

        if (uninferable)
          {
            // Forward-only indirect jumps with a few fixed destinations.
            std::vector<uint64_t> targets;
            unsigned n = static_cast<unsigned>(uniform(1, 3));
            for (unsigned i = 0; i < n; ++i)
              if (uint64_t t = claimForward(end))
                targets.push_back(t);
            if (targets.empty())
              return;
            inst.kind = InstructionKind::UninferableJump;
            indirect_[pc] = std::move(targets);
          }
        else if (uint64_t t = claimForward(end))
          {
            inst.kind = InstructionKind::InferableJump;
            inst.target = t;
          }
      }

      void closeBlock(IType itype)
      {
        RetirementBlock b;
        b.iaddr = block_.start;
        b.iretire = block_.halfwords;
        b.ilastsize = block_.lastSize;
        b.itype = itype;
        b.priv = 3;
        blocks_.push_back(b);
        block_ = {};
        blockCap_ = static_cast<unsigned>(uniform(1, kMaxBlockInstructions));
      }

      void closeTrapBlock(uint64_t pc, bool interrupt)
      {
        RetirementBlock b;
        b.iaddr = block_.count ? block_.start : pc;
        b.iretire = block_.halfwords;
        b.ilastsize = block_.count ? block_.lastSize : 2;
        b.itype = interrupt ? IType::Interrupt : IType::Exception;
        b.priv = 3;
        b.cause = interrupt ? 7 : 2;
        b.tval = interrupt ? 0 : pc;
        blocks_.push_back(b);
        block_ = {};
      }

      void fillDanglingTargets()
      {
        std::vector<uint64_t> missing;
        for (const auto& [addr, inst] : map_.entries())
          if (hasTarget(inst.kind) and not map_.contains(inst.target))
            missing.push_back(inst.target);
        std::sort(missing.begin(), missing.end());
        missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
        for (uint64_t t : missing)
          if (not map_.contains(t))
            map_.add(t, {2, InstructionKind::Sequential, 0});
      }

      void assignCycles()
      {
        uint64_t cycle = 0;
        size_t i = 0;
        while (i < blocks_.size())
          {
            unsigned n = static_cast<unsigned>(uniform(1, p_.lanes));
            for (unsigned lane = 0; lane < n and i < blocks_.size(); ++lane, ++i)
              {
                blocks_[i].cycle = cycle;
                blocks_[i].lane = lane;
              }
            cycle += chance(0.2) ? uniform(2, 4) : 1;
          }
      }

      WorkloadParams p_;
      std::mt19937_64 rng_;
      InstructionMap map_;
      std::set<uint64_t> reserved_;
      std::map<uint64_t, std::vector<uint64_t>> regionOrder_;
      std::map<uint64_t, size_t> lastBranch_;
      uint64_t retired_ = 0;
      uint64_t branches_ = 0;
      uint64_t jumps_ = 0;
      std::map<uint64_t, std::vector<uint64_t>> indirect_;
      std::vector<RetirementBlock> blocks_;
      OpenBlock block_;
      unsigned blockCap_ = kMaxBlockInstructions;
    };
  }

  /// Deterministic synthetic program plus a retirement stream that runs
  /// on it.
  inline Workload generateWorkload(const WorkloadParams& params)
  {
    params.validate();
    return detail::WorkloadBuilder(params).run();
  }

  /// A tight loop: `body` instructions ending in an always-taken backward
  /// branch, run for `iterations` passes, one block per cycle.
  inline Workload makeLoopWorkload(uint64_t iterations, unsigned body = 10)
  {
    Workload w;
    constexpr uint64_t base = 0x80000000;
    w.map.setEntry(base);
    for (unsigned i = 0; i + 1 < body; ++i)
      w.map.add(base + 4 * i, {4, InstructionKind::Sequential, 0});
    w.map.add(base + 4 * (body - 1), {4, InstructionKind::Branch, base});
    for (uint64_t it = 0; it < iterations; ++it)
      {
        RetirementBlock b;
        b.cycle = it;
        b.iaddr = base;
        b.iretire = 2 * body;
        b.ilastsize = 2;
        b.itype = IType::BranchTaken;
        w.blocks.push_back(b);
      }
    return w;
  }

}
