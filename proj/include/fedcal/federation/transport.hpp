//
// Copyright 2026 The fedcal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

// Byte-stream transports carrying length-prefixed RoundMessage frames.
//
// Loopback and TCP channels move the exact same frame bytes; a receiver
// never applies a message until its whole frame has arrived and parsed.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

#include "fedcal/errors.hpp"
#include "fedcal/federation/messages.hpp"

namespace fedcal {

using Millis = std::chrono::milliseconds;
inline constexpr Millis kDefaultTimeout{30000};

class Channel {
 public:
  virtual ~Channel() = default;

  void send(const RoundMessage& m) { send_frame(encode_frame(m)); }

  RoundMessage receive(Millis timeout = kDefaultTimeout) { return decode_frame(receive_frame(timeout)); }

  // Raw frame I/O; a frame includes its 4-byte length prefix.
  virtual void send_frame(const std::string& frame) = 0;
  virtual std::string receive_frame(Millis timeout) = 0;
};

namespace detail {

// One direction of a loopback pipe. Bytes are appended as they are written
// and frames are carved out on the reading side, like a socket.
class BytePipe {
 public:
  void write(const std::string& bytes) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      buf_ += bytes;
    }
    cv_.notify_all();
  }

  void close() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  std::string read_frame(Millis timeout) {
    std::unique_lock<std::mutex> lock(mu_);
    const auto ready = [&] {
      if (closed_) return true;
      if (buf_.size() < 4) return false;
      const auto n = decode_length_prefix(reinterpret_cast<const unsigned char*>(buf_.data()));
      return n > kMaxFrameBytes || buf_.size() >= 4 + static_cast<std::size_t>(n);
    };
    if (!cv_.wait_for(lock, timeout, ready)) throw ProtocolError("receive timed out");
    if (buf_.size() < 4) {
      throw ProtocolError(buf_.empty() ? "connection closed" : "truncated frame header");
    }
    const auto n = decode_length_prefix(reinterpret_cast<const unsigned char*>(buf_.data()));
    if (n > kMaxFrameBytes) throw ProtocolError("frame length exceeds limit");
    if (buf_.size() < 4 + static_cast<std::size_t>(n)) throw ProtocolError("truncated frame body");
    std::string frame = buf_.substr(0, 4 + n);
    buf_.erase(0, 4 + n);
    return frame;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::string buf_;
  bool closed_ = false;
};

}  // namespace detail

// In-process duplex channel endpoint; create both ends with make_loopback_pair.
class LoopbackChannel : public Channel {
 public:
  LoopbackChannel(std::shared_ptr<detail::BytePipe> in, std::shared_ptr<detail::BytePipe> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackChannel() override { out_->close(); }

  void send_frame(const std::string& frame) override { out_->write(frame); }
  std::string receive_frame(Millis timeout) override { return in_->read_frame(timeout); }

  // Writes arbitrary bytes (tests use this to inject truncated frames).
  void send_raw(const std::string& bytes) { out_->write(bytes); }
  void close() { out_->close(); }

 private:
  std::shared_ptr<detail::BytePipe> in_;
  std::shared_ptr<detail::BytePipe> out_;
};

inline std::pair<std::unique_ptr<LoopbackChannel>, std::unique_ptr<LoopbackChannel>>
make_loopback_pair() {
  auto a_to_b = std::make_shared<detail::BytePipe>();
  auto b_to_a = std::make_shared<detail::BytePipe>();
  return {std::make_unique<LoopbackChannel>(b_to_a, a_to_b),
          std::make_unique<LoopbackChannel>(a_to_b, b_to_a)};
}

class TcpChannel : public Channel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;
  ~TcpChannel() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void send_frame(const std::string& frame) override {
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("send failed: ") + std::strerror(errno));
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  std::string receive_frame(Millis timeout) override {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::string header = read_exact(4, deadline, true);
    const auto n = decode_length_prefix(reinterpret_cast<const unsigned char*>(header.data()));
    if (n > kMaxFrameBytes) throw ProtocolError("frame length exceeds limit");
    return header + read_exact(n, deadline, false);
  }

 private:
  std::string read_exact(std::size_t n, std::chrono::steady_clock::time_point deadline,
                         bool header) {
    std::string out(n, '\0');
    std::size_t got = 0;
    while (got < n) {
      const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw ProtocolError("receive timed out");
      pollfd p{fd_, POLLIN, 0};
      const int pr = ::poll(&p, 1, static_cast<int>(left.count()));
      if (pr < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("poll failed: ") + std::strerror(errno));
      }
      if (pr == 0) throw ProtocolError("receive timed out");
      const ssize_t r = ::recv(fd_, out.data() + got, n - got, 0);
      if (r < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError(std::string("recv failed: ") + std::strerror(errno));
      }
      if (r == 0) {
        if (header && got == 0) throw ProtocolError("connection closed");
        throw ProtocolError(header ? "truncated frame header" : "truncated frame body");
      }
      got += static_cast<std::size_t>(r);
    }
    return out;
  }

  int fd_;
};

class TcpListener {
 public:
  // port 0 picks an ephemeral port; see port().
  TcpListener(const std::string& host, int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw ConfigError("invalid IPv4 address '" + host + "'");
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 64) != 0) {
      const std::string err = std::strerror(errno);
      ::close(fd_);
      throw IoError("cannot listen on " + host + ":" + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }

  int port() const { return port_; }

  std::unique_ptr<TcpChannel> accept(Millis timeout = kDefaultTimeout) {
    pollfd p{fd_, POLLIN, 0};
    const int pr = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (pr <= 0) throw ProtocolError("timed out waiting for a school to connect");
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0) throw ProtocolError(std::string("accept failed: ") + std::strerror(errno));
    return std::make_unique<TcpChannel>(c);
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

// Connects with retries until the timeout elapses (the server may start late).
inline std::unique_ptr<TcpChannel> tcp_connect(const std::string& host, int port,
                                               Millis timeout = kDefaultTimeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  while (true) {
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res) {
      throw ConfigError("cannot resolve host '" + host + "'");
    }
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    const int rc = fd >= 0 ? ::connect(fd, res->ai_addr, res->ai_addrlen) : -1;
    ::freeaddrinfo(res);
    if (rc == 0) return std::make_unique<TcpChannel>(fd);
    if (fd >= 0) ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline) {
      throw ProtocolError("cannot connect to " + host + ":" + std::to_string(port));
    }
    std::this_thread::sleep_for(Millis(50));
  }
}

}  // namespace fedcal
