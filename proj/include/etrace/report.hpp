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

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <string>

#include "etrace/error.hpp"
#include "etrace/packet.hpp"

namespace etrace
{

  /// Baseline: every retired instruction traced as a full 4-byte opcode.
  constexpr uint64_t kBaselineBytesPerInstruction = 4;

  struct TraceReport
  {
    uint64_t retiredInstructions = 0;
    uint64_t payloadBytes = 0;           // Whole persisted stream: magic + frames.
    std::array<uint64_t, kPacketKinds> packetsByKind{};
    double compressionRatePercent = 0.0;
    uint64_t lossEvents = 0;

    uint64_t packets() const
    {
      uint64_t n = 0;
      for (auto c : packetsByKind)
        n += c;
      return n;
    }

    std::string toText() const
    {
      char rate[32];
      std::snprintf(rate, sizeof(rate), "%.1f", compressionRatePercent);
      char raw[40];
      std::snprintf(raw, sizeof(raw), "%.17g", compressionRatePercent);
      std::string s;
      s += "retired_instructions=" + std::to_string(retiredInstructions) + "\n";
      s += "payload_bytes=" + std::to_string(payloadBytes) + "\n";
      s += "packets=" + std::to_string(packets()) + "\n";
      for (size_t k = 0; k < kPacketKinds; ++k)
        s += std::string("packets_") + kindName(static_cast<PacketKind>(k)) + "="
          + std::to_string(packetsByKind[k]) + "\n";
      s += std::string("compression_rate_percent=") + rate + "\n";
      s += std::string("compression_rate_exact=") + raw + "\n";
      s += "loss_events=" + std::to_string(lossEvents) + "\n";
      return s;
    }
  };

  inline double compressionRate(uint64_t retiredInstructions, uint64_t payloadBytes)
  {
    if (retiredInstructions == 0)
      throw Error(Errc::EmptyStream, "no retired instructions");
    double baseline = double(kBaselineBytesPerInstruction) * double(retiredInstructions);
    return 100.0 * (1.0 - double(payloadBytes) / baseline);
  }

  inline TraceReport computeCompression(uint64_t retiredInstructions, uint64_t payloadBytes,
                                        std::span<const TracePacket> packets = {}, uint64_t lossEvents = 0)
  {
    TraceReport r;
    r.retiredInstructions = retiredInstructions;
    r.payloadBytes = payloadBytes;
    r.compressionRatePercent = compressionRate(retiredInstructions, payloadBytes);
    r.lossEvents = lossEvents;
    for (const auto& p : packets)
      ++r.packetsByKind[p.index()];
    return r;
  }

}
