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
#include <cstring>
#include <deque>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "etrace/error.hpp"
#include "etrace/packet.hpp"

namespace etrace
{

  /// Stream layout: the 4-byte magic, then repeated [length:1][payload].
  inline constexpr char kStreamMagic[4] = {'e', 't', 'p', '1'};
  constexpr size_t kMagicSize = sizeof(kStreamMagic);

  using Payload = std::vector<uint8_t>;

  /// Append one length-prefixed frame to a byte buffer.
  inline void appendFrame(std::vector<uint8_t>& buf, std::span<const uint8_t> payload)
  {
    if (payload.empty())
      throw Error(Errc::EmptyFrame, "zero-length payload");
    if (payload.size() > kMaxPayload)
      throw Error(Errc::PayloadTooLong, std::to_string(payload.size()) + " bytes");
    buf.push_back(static_cast<uint8_t>(payload.size()));
    buf.insert(buf.end(), payload.begin(), payload.end());
  }

  inline std::vector<uint8_t> streamHeader()
  { return std::vector<uint8_t>(kStreamMagic, kStreamMagic + kMagicSize); }

  /// Whole stream image for a payload sequence.
  inline std::vector<uint8_t> frameStream(std::span<const Payload> payloads)
  {
    auto buf = streamHeader();
    for (const auto& p : payloads)
      appendFrame(buf, p);
    return buf;
  }

  inline std::vector<uint8_t> frameStream(std::span<const TracePacket> packets)
  {
    auto buf = streamHeader();
    for (const auto& p : packets)
      appendFrame(buf, encodePacket(p));
    return buf;
  }

  /// Write magic plus frames to a sink; returns the frame count.
  inline size_t writeStream(std::ostream& sink, std::span<const TracePacket> packets)
  {
    auto buf = frameStream(packets);
    sink.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (not sink)
      throw Error(Errc::SinkError, "write failed");
    return packets.size();
  }

  /// Result of scanning a possibly incomplete stream.
  struct StreamScan
  {
    std::vector<Payload> payloads;
    size_t completeBytes = 0;            // Bytes covered by magic + whole frames.
    std::optional<Error> error;          // Set when the scan stopped early.
  };

  /// Parse as many whole frames as the bytes hold, without throwing.
  inline StreamScan scanStream(std::span<const uint8_t> bytes)
  {
    StreamScan scan;
    if (bytes.size() < kMagicSize)
      {
        if (std::memcmp(bytes.data(), kStreamMagic, bytes.size()) != 0)
          scan.error = Error(Errc::BadMagic, "stream does not start with etp1", 0);
        else
          scan.error = Error(Errc::TruncatedFrame, "stream shorter than its magic", bytes.size());
        return scan;
      }
    if (std::memcmp(bytes.data(), kStreamMagic, kMagicSize) != 0)
      {
        scan.error = Error(Errc::BadMagic, "stream does not start with etp1", 0);
        return scan;
      }
    size_t off = kMagicSize;
    scan.completeBytes = off;
    while (off < bytes.size())
      {
        size_t len = bytes[off];
        if (len == 0)
          {
            scan.error = Error(Errc::EmptyFrame, "at offset " + std::to_string(off), off);
            return scan;
          }
        if (off + 1 + len > bytes.size())
          {
            scan.error = Error(Errc::TruncatedFrame, "at offset " + std::to_string(off), off);
            return scan;
          }
        scan.payloads.emplace_back(bytes.begin() + off + 1, bytes.begin() + off + 1 + len);
        off += 1 + len;
        scan.completeBytes = off;
      }
    return scan;
  }

  /// Inverse of frameStream; throws on bad magic or a cut frame.
  inline std::vector<Payload> readStream(std::span<const uint8_t> bytes)
  {
    auto scan = scanStream(bytes);
    if (scan.error)
      throw *scan.error;
    return std::move(scan.payloads);
  }

  inline std::vector<TracePacket> decodePayloads(std::span<const Payload> payloads)
  {
    std::vector<TracePacket> packets;
    packets.reserve(payloads.size());
    for (size_t i = 0; i < payloads.size(); ++i)
      {
        try
          {
            packets.push_back(decodePacket(payloads[i]));
          }
        catch (const Error& e)
          {
            throw Error(e.code(), "frame " + std::to_string(i) + ": " + e.what(), i);
          }
      }
    return packets;
  }

  // ---------------------------------------------------------------------

  struct PushResult
  {
    bool accepted = false;
    bool lossEvent = false;   // First drop of a contiguous run of drops.
  };

  inline constexpr size_t kDefaultFifoCapacity = 64;   // Frames.

  /// Fixed-capacity queue that drops on overflow.
  template <typename T>
  class BoundedFifo
  {
  public:
    explicit BoundedFifo(size_t capacity)
      : capacity_(capacity)
    { }

    PushResult push(T item)
    {
      if (queue_.size() >= capacity_)
        {
          ++dropped_;
          bool first = not inDropRun_;
          inDropRun_ = true;
          return {false, first};
        }
      inDropRun_ = false;
      queue_.push_back(std::move(item));
      return {true, false};
    }

    std::optional<T> pop()
    {
      if (queue_.empty())
        return std::nullopt;
      T item = std::move(queue_.front());
      queue_.pop_front();
      return item;
    }

    size_t size() const
    { return queue_.size(); }

    size_t capacity() const
    { return capacity_; }

    bool empty() const
    { return queue_.empty(); }

    uint64_t dropped() const
    { return dropped_; }

  private:
    size_t capacity_;
    std::deque<T> queue_;
    uint64_t dropped_ = 0;
    bool inDropRun_ = false;
  };

}
