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
#include <stdexcept>
#include <string>

namespace etrace
{

  /// Every failure the library reports carries one of these codes.
  enum class Errc
  {
    MalformedLine,
    InvariantViolation,
    NonMonotonicCycle,
    OverlappingEntries,
    MissingTarget,
    UnknownKind,
    NonSequentialInterior,
    InvalidConfig,
    MapFull,
    PayloadTooLong,
    UnknownFormat,
    TruncatedPayload,
    InvalidQualStatus,
    MalformedPayload,
    UnknownAddress,
    DesyncDetected,
    SinkError,
    BadMagic,
    TruncatedFrame,
    EmptyFrame,
    ConnectionFailed,
    InfeasibleParams,
    EmptyStream,
    RoundTripMismatch,
    IoError,
  };

  inline const char* errcName(Errc code)
  {
    switch (code)
      {
      case Errc::MalformedLine:         return "MalformedLine";
      case Errc::InvariantViolation:    return "InvariantViolation";
      case Errc::NonMonotonicCycle:     return "NonMonotonicCycle";
      case Errc::OverlappingEntries:    return "OverlappingEntries";
      case Errc::MissingTarget:         return "MissingTarget";
      case Errc::UnknownKind:           return "UnknownKind";
      case Errc::NonSequentialInterior: return "NonSequentialInterior";
      case Errc::InvalidConfig:         return "InvalidConfig";
      case Errc::MapFull:               return "MapFull";
      case Errc::PayloadTooLong:        return "PayloadTooLong";
      case Errc::UnknownFormat:         return "UnknownFormat";
      case Errc::TruncatedPayload:      return "TruncatedPayload";
      case Errc::InvalidQualStatus:     return "InvalidQualStatus";
      case Errc::MalformedPayload:      return "MalformedPayload";
      case Errc::UnknownAddress:        return "UnknownAddress";
      case Errc::DesyncDetected:        return "DesyncDetected";
      case Errc::SinkError:             return "SinkError";
      case Errc::BadMagic:              return "BadMagic";
      case Errc::TruncatedFrame:        return "TruncatedFrame";
      case Errc::EmptyFrame:            return "EmptyFrame";
      case Errc::ConnectionFailed:      return "ConnectionFailed";
      case Errc::InfeasibleParams:      return "InfeasibleParams";
      case Errc::EmptyStream:           return "EmptyStream";
      case Errc::RoundTripMismatch:     return "RoundTripMismatch";
      case Errc::IoError:               return "IoError";
      }
    return "Unknown";
  }

  /// Exception type thrown by all etrace components. The optional
  /// location is a line number, byte offset, address or packet index
  /// depending on the code.
  class Error : public std::runtime_error
  {
  public:
    Error(Errc code, const std::string& what, uint64_t location = 0)
      : std::runtime_error(std::string(errcName(code)) + ": " + what),
        code_(code), location_(location)
    { }

    Errc code() const noexcept
    { return code_; }

    uint64_t location() const noexcept
    { return location_; }

  private:
    Errc code_;
    uint64_t location_;
  };

}
