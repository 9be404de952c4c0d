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

#include <random>
#include <sstream>

#include "etrace/pipeline.hpp"
#include "etrace/workload.hpp"

using namespace etrace;

namespace
{
  WorkloadParams randomParams(uint64_t seed, uint64_t maxInstructions = 8000)
  {
    std::mt19937_64 rng(seed * 7919 + 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    WorkloadParams p;
    p.seed = seed;
    p.instructionCount = 500 + rng() % maxInstructions;
    p.branchDensity = 0.3 * unit(rng);
    p.jumpDensity = 0.15 * unit(rng);
    p.uninferableFraction = unit(rng);
    p.trapRate = double(rng() % 30);
    p.lanes = 1 + unsigned(rng() % 3);
    p.loopBias = unit(rng);
    return p;
  }

  TracePacket randomPacket(std::mt19937_64& rng)
  {
    auto wide = [&] { return static_cast<int64_t>(rng()) >> (rng() % 64); };
    switch (rng() % 5)
      {
      case 0:
        return SyncStart{uint8_t(rng() % 4), static_cast<uint64_t>(wide())};
      case 1:
        return Trap{bool(rng() % 2), uint8_t(rng() % 4), uint16_t(rng()), rng(), static_cast<uint64_t>(wide())};
      case 2:
        return Support{bool(rng() % 2), static_cast<QualStatus>(rng() % 3)};
      case 3:
        return AddrOnly{wide()};
      default:
        {
          uint8_t count = uint8_t(1 + rng() % 31);
          uint32_t bits = uint32_t(rng()) & (count == 31 ? 0x7fffffffu : ((1u << count) - 1));
          return BranchMapPkt{count, bits, count == 31 ? 0 : wide()};
        }
      }
  }
}

TEST_CASE("log text is canonical")
{
  for (uint64_t seed = 0; seed < 10; ++seed)
    {
      auto w = generateWorkload(randomParams(seed, 2000));
      auto text = formatRetirementLog(w.blocks);
      CHECK(formatRetirementLog(parseRetirementLog(text)) == text);
      CHECK(formatRetirementLog(parseRetirementLog("# header\n" + text + "# trailer\n")) == text);
    }
}

TEST_CASE("block shapes agree with the decoder walk")
{
  for (uint64_t seed = 0; seed < 10; ++seed)
    {
      auto w = generateWorkload(randomParams(seed, 2000));
      std::vector<uint64_t> pcs;
      for (const auto& b : w.blocks)
        {
          if (b.iretire == 0)
            continue;
          pcs.clear();
          appendRetiredPcs(w.map, b, pcs);
          auto shape = blockFromWalk(w.map, b.iaddr, pcs.size(), b.itype == IType::BranchTaken);
          if (isTrap(b.itype))
            CHECK(shape.itype == IType::None);
          else
            CHECK(shape.itype == b.itype);
          CHECK(shape.iretire == b.iretire);
          CHECK(shape.ilastsize == b.ilastsize);
        }
    }
}

TEST_CASE("codec round trip and minimality over random packets")
{
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 10000; ++i)
    {
      auto p = randomPacket(rng);
      auto bytes = encodePacket(p);
      REQUIRE(decodePacket(bytes) == p);
      if (bytes.size() > 1)
        {
          std::vector<uint8_t> shorter(bytes.begin(), bytes.end() - 1);
          bool same = false;
          try
            {
              same = decodePacket(shorter) == p;
            }
          catch (const Error&)
            { }
          REQUIRE_FALSE(same);
        }
    }
}

TEST_CASE("lossless round trip with encoder invariants")
{
  for (uint64_t seed = 0; seed < 100; ++seed)
    {
      auto params = randomParams(seed);
      auto w = generateWorkload(params);
      EncodeOptions o;
      o.config.lanes = params.lanes;
      o.config.resyncThreshold = 5 + seed % 200;
      auto r = runRoundTrip(w.map, w.blocks, o);
      INFO("seed " << seed);
      REQUIRE(r.decodedPcs == retiredPcs(w.map, w.blocks));

      uint64_t bits = 0, branchBlocks = 0, since = 0;
      for (const auto& b : w.blocks)
        branchBlocks += isBranch(b.itype);
      for (const auto& p : r.encoded.delivered)
        {
          if (auto m = std::get_if<BranchMapPkt>(&p))
            {
              CHECK(m->count <= kMaxBranches);
              bits += m->count;
            }
          since = std::holds_alternative<SyncStart>(p) ? 0 : since + 1;
          CHECK(since <= o.config.resyncThreshold);
        }
      CHECK(bits == branchBlocks);
      CHECK(r.decodeReport.branchBitsDelivered == bits);
      CHECK(r.decodeReport.branchBitsConsumed == bits);
      CHECK(r.decodeReport.unconsumedBits == 0);
    }
}

TEST_CASE("last reported address tracks address-bearing packets")
{
  auto params = randomParams(77);
  auto w = generateWorkload(params);
  EncoderConfig c;
  c.lanes = params.lanes;
  Encoder enc(c);
  uint64_t base = 0;
  size_t i = 0;
  auto check = [&](const std::vector<TracePacket>& pkts) {
    for (const auto& p : pkts)
      {
        if (auto s = std::get_if<SyncStart>(&p))
          base = s->address;
        else if (auto t = std::get_if<Trap>(&p))
          base = t->handlerAddress;
        else if (auto a = std::get_if<AddrOnly>(&p))
          base += static_cast<uint64_t>(a->delta);
        else if (auto m = std::get_if<BranchMapPkt>(&p); m and not m->full())
          base += static_cast<uint64_t>(m->delta);
      }
    if (not pkts.empty())
      CHECK(enc.state().lastReportedAddr == base);
  };
  while (i < w.blocks.size())
    {
      size_t j = i + 1;
      while (j < w.blocks.size() and w.blocks[j].cycle == w.blocks[i].cycle)
        ++j;
      check(enc.step(std::span(w.blocks).subspan(i, j - i)));
      i = j;
    }
  check(enc.flush());
}

TEST_CASE("priority decision is a pure function")
{
  EncoderState s;
  s.started = true;
  for (int i = 0; i < 12; ++i)
    s.branchMap = recordBranch(s.branchMap, i % 3 == 0);
  RetirementBlock b;
  b.iaddr = 0x1000;
  b.iretire = 2;
  b.itype = IType::UninferableJump;
  auto first = priorityDecide(s, b, std::nullopt);
  for (int i = 0; i < 100; ++i)
    CHECK(priorityDecide(s, b, std::nullopt) == first);
}

TEST_CASE("multi-lane encoding decodes like single-lane")
{
  for (uint64_t seed = 0; seed < 30; ++seed)
    {
      auto params = randomParams(seed, 5000);
      params.lanes = 2 + seed % 3;
      auto w = generateWorkload(params);
      auto serial = w.blocks;
      for (size_t i = 0; i < serial.size(); ++i)
        {
          serial[i].cycle = i;
          serial[i].lane = 0;
        }
      EncodeOptions multi;
      multi.config.lanes = params.lanes;
      auto a = runRoundTrip(w.map, w.blocks, multi);
      auto b = runRoundTrip(w.map, serial, {});
      CHECK(a.decodedPcs == b.decodedPcs);
    }
}

TEST_CASE("decoding is deterministic")
{
  auto w = generateWorkload(randomParams(5));
  EncodeOptions o;
  o.config.lanes = 3;
  auto a = runRoundTrip(w.map, w.blocks, o);
  auto b = runRoundTrip(w.map, w.blocks, o);
  CHECK(a.stream == b.stream);
  CHECK(a.decodedPcs == b.decodedPcs);
  CHECK(a.report.toText() == b.report.toText());
  CHECK(a.decodeReport.toText() == b.decodeReport.toText());
}

TEST_CASE("roomy fifo is transparent")
{
  for (uint64_t seed = 0; seed < 10; ++seed)
    {
      auto params = randomParams(seed, 4000);
      auto w = generateWorkload(params);
      EncodeOptions plain;
      plain.config.lanes = params.lanes;
      auto base = runRoundTrip(w.map, w.blocks, plain);
      EncodeOptions roomy = plain;
      roomy.fifoCapacity = base.encoded.emitted.size();
      roomy.drainPerCycle = 0;
      auto r = runRoundTrip(w.map, w.blocks, roomy);
      CHECK(r.encoded.fifoDropped == 0);
      CHECK(r.decodedPcs == base.decodedPcs);
      CHECK(r.stream == base.stream);
    }
}

TEST_CASE("each loss run yields one TraceLost and recovery at the next sync")
{
  uint64_t runs = 0;
  for (uint64_t seed = 0; seed < 60; ++seed)
    {
      auto params = randomParams(seed, 6000);
      auto w = generateWorkload(params);
      EncodeOptions o;
      o.config.lanes = params.lanes;
      o.fifoCapacity = 1 + seed % 3;
      auto r = runRoundTrip(w.map, w.blocks, o);   // Verifies every segment.
      const auto& d = r.encoded.delivered;
      uint64_t lost = 0;
      for (size_t i = 0; i < d.size(); ++i)
        {
          auto s = std::get_if<Support>(&d[i]);
          if (not s or s->qual != QualStatus::TraceLost)
            continue;
          ++lost;
          auto next = std::find_if(d.begin() + i + 1, d.end(), [](const TracePacket& q) {
            return not std::holds_alternative<Support>(q);
          });
          if (next != d.end())
            CHECK(std::holds_alternative<SyncStart>(*next));
        }
      CHECK(lost == r.encoded.fifoLossEvents);
      CHECK(r.report.lossEvents == lost);
      runs += lost;

      // Every non-empty segment opens on its sync address.
      const auto& segs = r.decodeReport.segments;
      for (size_t k = 0; k < segs.size(); ++k)
        {
          size_t end = k + 1 < segs.size() ? segs[k + 1].firstPc : r.decodedPcs.size();
          if (segs[k].firstPc < end)
            CHECK(r.decodedPcs[segs[k].firstPc] == segs[k].address);
        }
    }
  CHECK(runs > 0);
}

TEST_CASE("compression falls as control flow gets denser")
{
  double previous = 101.0;
  for (double density : {0.0, 0.05, 0.1, 0.2, 0.3})
    {
      double sum = 0;
      for (uint64_t seed = 0; seed < 20; ++seed)
        {
          WorkloadParams p;
          p.seed = seed;
          p.instructionCount = 10000;
          p.branchDensity = density;
          p.jumpDensity = density / 3;
          p.uninferableFraction = 0.3;
          auto w = generateWorkload(p);
          sum += runRoundTrip(w.map, w.blocks, {}).report.compressionRatePercent;
        }
      double mean = sum / 20;
      INFO("density " << density << " mean " << mean);
      CHECK(mean <= previous);
      previous = mean;
    }
}

TEST_CASE("report arithmetic is exact before rounding")
{
  std::mt19937_64 rng(8);
  for (int i = 0; i < 1000; ++i)
    {
      uint64_t retired = 1 + rng() % 1000000;
      uint64_t bytes = rng() % (8 * retired);
      auto r = computeCompression(retired, bytes);
      CHECK(r.compressionRatePercent == 100.0 * (1.0 - double(bytes) / (4.0 * double(retired))));
    }
}

TEST_CASE("framing round trips random payload sequences")
{
  std::mt19937_64 rng(99);
  for (int i = 0; i < 200; ++i)
    {
      std::vector<Payload> payloads(rng() % 20);
      for (auto& p : payloads)
        {
          p.resize(1 + rng() % 255);
          for (auto& b : p)
            b = uint8_t(rng());
        }
      auto bytes = frameStream(payloads);
      CHECK(readStream(bytes) == payloads);
    }
}
