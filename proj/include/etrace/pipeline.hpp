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
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "etrace/decoder.hpp"
#include "etrace/encoder.hpp"
#include "etrace/report.hpp"
#include "etrace/transport.hpp"

namespace etrace
{

  struct EncodeOptions
  {
    EncoderConfig config;
    std::optional<size_t> fifoCapacity;   // None: lossless link.
    size_t drainPerCycle = 1;             // Frames the link moves per encoder step.
  };

  struct EncodeResult
  {
    std::vector<TracePacket> emitted;         // Everything the encoder produced.
    std::vector<TracePacket> delivered;       // What survived the FIFO.
    std::vector<uint64_t> deliveredSyncOrigins;  // Block index per delivered SyncStart.
    uint64_t fifoLossEvents = 0;
    uint64_t fifoDropped = 0;
  };

  /// Run blocks through the encoder and an optional bounded FIFO. Every
  /// drop is fed back to the encoder so it can resynchronise. Once the
  /// last block is in, the FIFO drains before each closing packet.
  inline EncodeResult encodeThroughLink(std::span<const RetirementBlock> blocks, const EncodeOptions& options)
  {
    Encoder encoder(options.config);
    EncodeResult res;
    BoundedFifo<TracePacket> fifo(options.fifoCapacity.value_or(SIZE_MAX));
    size_t syncsEmitted = 0;
    std::deque<std::optional<uint64_t>> origins;   // Parallel to the FIFO contents.

    auto push = [&](std::vector<TracePacket>&& pkts) {
      for (auto& p : pkts)
        {
          std::optional<uint64_t> origin;
          if (std::holds_alternative<SyncStart>(p))
            origin = encoder.syncOrigins().at(syncsEmitted++);
          res.emitted.push_back(p);
          auto r = fifo.push(std::move(p));
          if (r.accepted)
            {
              origins.push_back(origin);
              continue;
            }
          if (r.lossEvent)
            ++res.fifoLossEvents;
          // Also covers a dropped TraceLost or SyncStart inside one run.
          if (not encoder.state().lostPending)
            encoder.notifyLoss();
        }
    };
    auto drain = [&](size_t n) {
      for (size_t i = 0; i < n; ++i)
        {
          auto p = fifo.pop();
          if (not p)
            break;
          if (origins.front())
            res.deliveredSyncOrigins.push_back(*origins.front());
          origins.pop_front();
          res.delivered.push_back(std::move(*p));
        }
    };

    size_t i = 0;
    while (i < blocks.size())
      {
        size_t j = i + 1;
        while (j < blocks.size() and blocks[j].cycle == blocks[i].cycle)
          ++j;
        push(encoder.step(blocks.subspan(i, j - i)));
        drain(options.drainPerCycle);
        i = j;
      }
    // Retirement has stopped, so the link keeps pace with the closing packets.
    drain(SIZE_MAX);
    for (auto& p : encoder.flush())
      {
        push({std::move(p)});
        drain(SIZE_MAX);
      }
    res.fifoDropped = fifo.dropped();
    return res;
  }

  /// Source-side truth: PCs of every retired instruction, and for each
  /// block the offset of its first PC in the traced (qualified) sequence.
  struct ExpectedTrace
  {
    uint64_t retired = 0;
    std::vector<uint64_t> traced;
    std::vector<size_t> blockOffset;
  };

  inline ExpectedTrace expectedTrace(const InstructionMap& map, std::span<const RetirementBlock> blocks,
                                     const EncoderConfig& config)
  {
    ExpectedTrace e;
    std::vector<uint64_t> scratch;
    e.blockOffset.reserve(blocks.size());
    for (const auto& b : blocks)
      {
        e.blockOffset.push_back(e.traced.size());
        scratch.clear();
        appendRetiredPcs(map, b, scratch);
        e.retired += scratch.size();
        if (qualify(b, config))
          e.traced.insert(e.traced.end(), scratch.begin(), scratch.end());
      }
    return e;
  }

  /// Check decoded PCs against the source, segment by segment. A segment
  /// runs from one delivered SyncStart to the next; it must match the
  /// source exactly from its sync point, and must be complete unless the
  /// trace was lost inside it. Throws RoundTripMismatch with the first
  /// divergent PC index.
  inline void verifyReconstruction(const ExpectedTrace& expected, std::span<const uint64_t> decoded,
                                   const DecodeReport& report, std::span<const TracePacket> delivered,
                                   std::span<const uint64_t> syncOrigins)
  {
    auto mismatch = [](size_t at, const std::string& why) {
      return Error(Errc::RoundTripMismatch, "PC index " + std::to_string(at) + ": " + why, at);
    };
    const auto& segs = report.segments;
    if (segs.size() != syncOrigins.size())
      throw mismatch(0, "sync count differs from delivered sync origins");
    if (segs.empty())
      {
        if (not decoded.empty())
          throw mismatch(0, "PCs decoded without a sync");
        if (not expected.traced.empty())
          throw mismatch(0, "nothing decoded");
        return;
      }
    if (segs.front().firstPc != 0)
      throw mismatch(0, "PCs decoded before the first sync");

    for (size_t s = 0; s < segs.size(); ++s)
      {
        size_t first = segs[s].firstPc;
        size_t last = s + 1 < segs.size() ? segs[s + 1].firstPc : decoded.size();
        size_t start = expected.blockOffset.at(syncOrigins[s]);
        size_t endPacket = s + 1 < segs.size() ? segs[s + 1].packetIndex : delivered.size();

        bool lost = false;
        for (size_t k = segs[s].packetIndex; k < endPacket; ++k)
          if (auto sup = std::get_if<Support>(&delivered[k]); sup and sup->qual == QualStatus::TraceLost)
            lost = true;

        for (size_t k = first; k < last; ++k)
          {
            size_t src = start + (k - first);
            if (src >= expected.traced.size() or decoded[k] != expected.traced[src])
              throw mismatch(k, "decoded " + detail::hex(decoded[k]) + " expected "
                             + (src < expected.traced.size() ? detail::hex(expected.traced[src]) : "end"));
          }
        if (not lost)
          {
            size_t want = s + 1 < segs.size() ? expected.blockOffset.at(syncOrigins[s + 1])
              : expected.traced.size();
            if (start + (last - first) != want)
              throw mismatch(last, "segment incomplete: " + std::to_string(last - first) + " PCs, expected "
                             + std::to_string(want - start));
          }
      }
  }

  struct PipelineResult
  {
    EncodeResult encoded;
    std::vector<uint8_t> stream;       // Persisted bytes: magic + frames.
    std::vector<uint64_t> decodedPcs;
    DecodeReport decodeReport;
    TraceReport report;
  };

  /// Encode, frame, re-read, decode and verify one workload.
  inline PipelineResult runRoundTrip(const InstructionMap& map, std::span<const RetirementBlock> blocks,
                                     const EncodeOptions& options)
  {
    PipelineResult r;
    r.encoded = encodeThroughLink(blocks, options);
    r.stream = frameStream(r.encoded.delivered);

    auto packets = decodePayloads(readStream(r.stream));
    auto decoded = decodeStream(packets, map);
    r.decodedPcs = std::move(decoded.pcs);
    r.decodeReport = std::move(decoded.report);

    auto expected = expectedTrace(map, blocks, options.config);
    verifyReconstruction(expected, r.decodedPcs, r.decodeReport, packets, r.encoded.deliveredSyncOrigins);
    r.report = computeCompression(expected.retired, r.stream.size(), packets, r.decodeReport.lossEvents);
    return r;
  }

}
