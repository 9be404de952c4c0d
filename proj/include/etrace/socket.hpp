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

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <unistd.h>
#include <netinet/in.h>

#include "etrace/error.hpp"
#include "etrace/transport.hpp"

namespace etrace
{

  struct Endpoint
  {
    std::string host;
    uint16_t port = 0;
  };

  /// Parse "HOST:PORT".
  inline Endpoint parseEndpoint(std::string_view text)
  {
    auto colon = text.rfind(':');
    unsigned port = 0;
    if (colon == std::string_view::npos or colon == 0
        or not detail::parseDec(text.substr(colon + 1), port) or port > 65535)
      throw Error(Errc::ConnectionFailed, "bad endpoint '" + std::string(text) + "'");
    return {std::string(text.substr(0, colon)), static_cast<uint16_t>(port)};
  }

  namespace detail
  {
    /// Owning file descriptor.
    class Fd
    {
    public:
      Fd() = default;
      explicit Fd(int fd) : fd_(fd) { }
      Fd(Fd&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
      Fd& operator=(Fd&& o) noexcept
      {
        if (this != &o)
          {
            reset();
            fd_ = o.fd_;
            o.fd_ = -1;
          }
        return *this;
      }
      Fd(const Fd&) = delete;
      Fd& operator=(const Fd&) = delete;
      ~Fd() { reset(); }

      int get() const { return fd_; }
      explicit operator bool() const { return fd_ >= 0; }

      void reset()
      {
        if (fd_ >= 0)
          ::close(fd_);
        fd_ = -1;
      }

    private:
      int fd_ = -1;
    };

    struct AddrInfo
    {
      addrinfo* list = nullptr;
      ~AddrInfo() { if (list) ::freeaddrinfo(list); }
    };

    inline void resolve(const Endpoint& ep, bool passive, AddrInfo& out)
    {
      addrinfo hints{};
      hints.ai_family = AF_UNSPEC;
      hints.ai_socktype = SOCK_STREAM;
      if (passive)
        hints.ai_flags = AI_PASSIVE;
      std::string port = std::to_string(ep.port);
      int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &out.list);
      if (rc != 0)
        throw Error(Errc::ConnectionFailed, ep.host + ": " + ::gai_strerror(rc));
    }

    inline std::string errnoText()
    { return std::strerror(errno); }
  }

  /// Single-connection collector: binds at construction, so callers can
  /// learn an ephemeral port before a sender connects.
  class Collector
  {
  public:
    explicit Collector(const Endpoint& ep)
    {
      detail::AddrInfo ai;
      detail::resolve(ep, true, ai);
      for (auto* p = ai.list; p; p = p->ai_next)
        {
          detail::Fd fd(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
          if (not fd)
            continue;
          int one = 1;
          ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
          if (::bind(fd.get(), p->ai_addr, p->ai_addrlen) == 0 and ::listen(fd.get(), 1) == 0)
            {
              listener_ = std::move(fd);
              break;
            }
        }
      if (not listener_)
        throw Error(Errc::ConnectionFailed, "cannot listen on " + ep.host + ":" + std::to_string(ep.port)
                    + ": " + detail::errnoText());
    }

    uint16_t port() const
    {
      sockaddr_storage ss{};
      socklen_t len = sizeof(ss);
      ::getsockname(listener_.get(), reinterpret_cast<sockaddr*>(&ss), &len);
      if (ss.ss_family == AF_INET6)
        return ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port);
      return ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
    }

    /// Accept one sender, read to end of stream, and persist the magic
    /// plus every complete frame to sink. Returns the frame count. A
    /// stream cut mid-frame still persists its complete frames, then
    /// throws TruncatedFrame.
    size_t collect(std::ostream& sink, std::chrono::milliseconds timeout)
    {
      pollfd pfd{listener_.get(), POLLIN, 0};
      int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
      if (rc <= 0)
        throw Error(Errc::ConnectionFailed, rc == 0 ? "no sender before timeout" : detail::errnoText());
      detail::Fd conn(::accept(listener_.get(), nullptr, nullptr));
      if (not conn)
        throw Error(Errc::ConnectionFailed, "accept: " + detail::errnoText());

      std::vector<uint8_t> bytes;
      uint8_t buf[4096];
      while (true)
        {
          pollfd cfd{conn.get(), POLLIN, 0};
          rc = ::poll(&cfd, 1, static_cast<int>(timeout.count()));
          if (rc == 0)
            break;   // Peer went quiet; treat what we have as the stream.
          if (rc < 0)
            throw Error(Errc::ConnectionFailed, "poll: " + detail::errnoText());
          ssize_t n = ::recv(conn.get(), buf, sizeof(buf), 0);
          if (n < 0)
            {
              if (errno == EINTR)
                continue;
              if (errno == ECONNRESET)
                break;
              throw Error(Errc::ConnectionFailed, "recv: " + detail::errnoText());
            }
          if (n == 0)
            break;
          bytes.insert(bytes.end(), buf, buf + n);
        }

      auto scan = scanStream(bytes);
      if (scan.error and scan.error->code() == Errc::BadMagic)
        throw *scan.error;
      sink.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(scan.completeBytes));
      sink.flush();
      if (not sink)
        throw Error(Errc::SinkError, "write failed");
      if (scan.error)
        throw *scan.error;
      return scan.payloads.size();
    }

  private:
    detail::Fd listener_;
  };

  inline size_t serveCollector(const Endpoint& ep, std::ostream& sink, std::chrono::milliseconds timeout)
  {
    Collector collector(ep);
    return collector.collect(sink, timeout);
  }

  /// Connect and write raw bytes, then close.
  inline void sendBytes(const Endpoint& ep, std::span<const uint8_t> bytes)
  {
    detail::AddrInfo ai;
    detail::resolve(ep, false, ai);
    detail::Fd fd;
    for (auto* p = ai.list; p; p = p->ai_next)
      {
        detail::Fd s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
        if (s and ::connect(s.get(), p->ai_addr, p->ai_addrlen) == 0)
          {
            fd = std::move(s);
            break;
          }
      }
    if (not fd)
      throw Error(Errc::ConnectionFailed, "cannot connect to " + ep.host + ":" + std::to_string(ep.port));

    size_t off = 0;
    while (off < bytes.size())
      {
        ssize_t n = ::send(fd.get(), bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
        if (n < 0)
          {
            if (errno == EINTR)
              continue;
            throw Error(Errc::ConnectionFailed, "send: " + detail::errnoText());
          }
        off += static_cast<size_t>(n);
      }
    ::shutdown(fd.get(), SHUT_WR);
  }

  /// Stream a payload sequence as magic + frames. Returns frames sent.
  inline size_t sendFrames(const Endpoint& ep, std::span<const Payload> payloads)
  {
    auto bytes = frameStream(payloads);
    sendBytes(ep, bytes);
    return payloads.size();
  }

}
