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

#include "etrace/instruction_model.hpp"

using namespace etrace;

namespace
{
  Errc errcOf(auto&& fn)
  {
    try
      {
        fn();
      }
    catch (const Error& e)
      {
        return e.code();
      }
    FAIL("no error raised");
    return Errc::IoError;
  }

  InstructionMap loopMap()
  {
    return parseInstructionMap("entry,0x1000\n0x1000,4,seq\n0x1004,4,br,0x1000\n");
  }
}

TEST_CASE("retirement log line maps field by field")
{
  auto blocks = parseRetirementLog("0,0,0x80000000,2,2,7,3,0,0\n");
  REQUIRE(blocks.size() == 1);
  const auto& b = blocks[0];
  CHECK(b.cycle == 0);
  CHECK(b.lane == 0);
  CHECK(b.iaddr == 0x80000000);
  CHECK(b.iretire == 2);
  CHECK(b.ilastsize == 2);
  CHECK(b.itype == IType::InferableJump);
  CHECK(b.priv == 3);
}

TEST_CASE("empty log parses to nothing")
{
  CHECK(parseRetirementLog("").empty());
  CHECK(parseRetirementLog("# comment only\n\n").empty());
}

TEST_CASE("misaligned iaddr is rejected")
{
  CHECK(errcOf([] { parseRetirementLog("0,0,0x80000001,1,1,0,3,0,0\n"); }) == Errc::InvariantViolation);
}

TEST_CASE("log structure errors")
{
  CHECK(errcOf([] { parseRetirementLog("0,0,0x1000\n"); }) == Errc::MalformedLine);
  CHECK(errcOf([] { parseRetirementLog("5,0,0x1000,2,2,0,3,0,0\n4,0,0x1004,2,2,0,3,0,0\n"); })
        == Errc::NonMonotonicCycle);
  CHECK(errcOf([] { parseRetirementLog("0,0,0x1000,2,2,0,3,0,0\n0,0,0x1004,2,2,0,3,0,0\n"); })
        == Errc::InvariantViolation);
  // ilastsize larger than the block.
  CHECK(errcOf([] { parseRetirementLog("0,0,0x1000,1,2,0,3,0,0\n"); }) == Errc::InvariantViolation);
  CHECK(errcOf([] { parseRetirementLog("0,0,0x1000,2,2,9,3,0,0\n"); }) == Errc::InvariantViolation);
}

TEST_CASE("lanes of one cycle come out in lane order")
{
  auto blocks = parseRetirementLog("0,1,0x1010,2,2,0,3,0,0\n0,0,0x1000,2,2,0,3,0,0\n");
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[0].lane == 0);
  CHECK(blocks[1].lane == 1);
}

TEST_CASE("log text round trips")
{
  const char* text = "0,0,0x80000000,2,2,7,3,0,0x0\n"
                     "1,0,0x80000010,6,2,1,3,2,0x80000014\n"
                     "1,1,0x80001000,1,1,5,1,0,0x0\n";
  auto blocks = parseRetirementLog(text);
  CHECK(formatRetirementLog(blocks) == text);
  CHECK(parseRetirementLog(formatRetirementLog(blocks)) == blocks);
}

TEST_CASE("instruction map parses entries and targets")
{
  auto map = loopMap();
  CHECK(map.entries().size() == 2);
  CHECK(map.entry() == 0x1000);
  REQUIRE(map.find(0x1004));
  CHECK(map.find(0x1004)->kind == InstructionKind::Branch);
  CHECK(map.find(0x1004)->target == 0x1000);
  CHECK(map.find(0x1002) == nullptr);
  CHECK(parseInstructionMap(formatInstructionMap(map)).entries() == map.entries());
}

TEST_CASE("instruction map errors")
{
  try
    {
      parseInstructionMap("0x1000,4,seq\n0x1002,2,seq\n");
      FAIL("overlap accepted");
    }
  catch (const Error& e)
    {
      CHECK(e.code() == Errc::OverlappingEntries);
      CHECK(e.location() == 0x1002);
    }
  try
    {
      parseInstructionMap("0x1000,4,br\n");
      FAIL("missing target accepted");
    }
  catch (const Error& e)
    {
      CHECK(e.code() == Errc::MissingTarget);
      CHECK(e.location() == 0x1000);
    }
  CHECK(errcOf([] { parseInstructionMap("0x1000,4,nop\n"); }) == Errc::UnknownKind);
  CHECK(errcOf([] { parseInstructionMap("0x1000,3,seq\n"); }) == Errc::InvariantViolation);
}

TEST_CASE("entry defaults to the lowest address")
{
  auto map = parseInstructionMap("0x2000,2,seq\n0x1000,2,seq\n");
  CHECK(map.entry() == 0x1000);
}

TEST_CASE("block from walk")
{
  auto map = loopMap();
  CHECK(blockFromWalk(map, 0x1000, 2, true) == BlockShape{4, 2, IType::BranchTaken});
  CHECK(blockFromWalk(map, 0x1000, 2, false) == BlockShape{4, 2, IType::BranchNotTaken});

  auto single = parseInstructionMap("0x1000,2,seq\n");
  CHECK(blockFromWalk(single, 0x1000, 1) == BlockShape{1, 1, IType::None});

  auto interior = parseInstructionMap("0x1000,4,br,0x1000\n0x1004,4,seq\n");
  CHECK(errcOf([&] { blockFromWalk(interior, 0x1000, 2); }) == Errc::NonSequentialInterior);
  CHECK(errcOf([&] { blockFromWalk(map, 0x2000, 1); }) == Errc::UnknownAddress);
}

TEST_CASE("itype collapses call and return kinds")
{
  CHECK(itypeFor(InstructionKind::Call, false) == IType::InferableJump);
  CHECK(itypeFor(InstructionKind::InferableJump, false) == IType::InferableJump);
  CHECK(itypeFor(InstructionKind::UninferableCall, false) == IType::UninferableJump);
  CHECK(itypeFor(InstructionKind::Return, false) == IType::UninferableJump);
  CHECK(itypeFor(InstructionKind::UninferableJump, false) == IType::UninferableJump);
  CHECK(itypeFor(InstructionKind::TrapReturn, false) == IType::TrapReturn);
  CHECK(itypeFor(InstructionKind::Sequential, false) == IType::None);
}

TEST_CASE("retired PCs expand blocks against the map")
{
  auto map = loopMap();
  std::vector<RetirementBlock> blocks(2);
  blocks[0] = {0, 0, 0x1000, 4, 2, IType::BranchTaken};
  blocks[1] = {1, 0, 0x1000, 4, 2, IType::BranchNotTaken};
  CHECK(retiredPcs(map, blocks) == std::vector<uint64_t>{0x1000, 0x1004, 0x1000, 0x1004});

  blocks[1].itype = IType::None;
  CHECK(errcOf([&] { retiredPcs(map, blocks); }) == Errc::InvariantViolation);
}
