// Copyright 2026 The flsplit Authors
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
#include <optional>
#include <string>
#include <utility>

#include "flsplit/wire.hpp"

namespace flsplit {

enum class TransportKind { kLoopback, kTcp };

inline std::string_view to_string(TransportKind k) { return k == TransportKind::kTcp ? "tcp" : "loopback"; }

inline TransportKind parse_transport(std::string_view s) {
  if (s == "loopback") return TransportKind::kLoopback;
  if (s == "tcp") return TransportKind::kTcp;
  throw Error(ErrorCode::kConfig, "unknown transport '" + std::string(s) + "'");
}

// Append-only record of frames, shared between threads.
class FrameLog {
 public:
  void add(const Bytes& frame) {
    std::lock_guard lock(mu_);
    frames_.push_back(frame);
  }
  std::vector<Bytes> frames() const {
    std::lock_guard lock(mu_);
    return frames_;
  }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return frames_.size();
  }

 private:
  mutable std::mutex mu_;
  std::vector<Bytes> frames_;
};

using Clock = std::chrono::steady_clock;

// One end of a bidirectional, ordered, reliable frame channel.
class Channel {
 public:
  virtual ~Channel() = default;

  virtual void send_frame(const Bytes& frame) = 0;
  // Blocks until a frame arrives; nullopt timeout waits forever.
  virtual Bytes recv_frame(std::optional<std::chrono::milliseconds> timeout = std::nullopt) = 0;
  virtual void close() = 0;

  void send(const Message& msg) {
    Bytes frame = encode(msg);
    if (stats_) stats_->record_sent(msg, frame.size());
    if (log_) log_->add(frame);
    send_frame(frame);
  }

  Message recv(std::optional<std::chrono::milliseconds> timeout = std::nullopt) {
    Bytes frame = recv_frame(timeout);
    Message m = decode(frame);
    if (stats_) stats_->record_received(message_class(m), frame.size());
    return m;
  }

  template <class T>
  T recv_as(std::optional<std::chrono::milliseconds> timeout = std::nullopt) {
    Message m = recv(timeout);
    if (auto* c = std::get_if<ControlMsg>(&m); c && !std::is_same_v<T, ControlMsg>) {
      if (c->kind == ControlKind::kError) {
        throw Error(static_cast<ErrorCode>(c->code), "peer reported: " + c->text);
      }
      throw Error(ErrorCode::kProtocol, "unexpected control message: " + c->text);
    }
    auto* t = std::get_if<T>(&m);
    if (t == nullptr) {
      throw Error(ErrorCode::kProtocol, "expected " + std::string(to_string(static_cast<MsgClass>(
                                                           Message(T{}).index() + 1))) +
                                            ", got " + std::string(to_string(message_class(m))));
    }
    return std::move(*t);
  }

  void attach_stats(CommStats* s) { stats_ = s; }
  void attach_log(FrameLog* l) { log_ = l; }
  CommStats* stats() const { return stats_; }

 private:
  CommStats* stats_ = nullptr;
  FrameLog* log_ = nullptr;
};

// ---------------------------------------------------------------------------

namespace transport_detail {

struct Queue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Bytes> frames;
  bool closed = false;
};

}  // namespace transport_detail

class LoopbackChannel final : public Channel {
 public:
  LoopbackChannel(std::shared_ptr<transport_detail::Queue> in, std::shared_ptr<transport_detail::Queue> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackChannel() override { close(); }

  void send_frame(const Bytes& frame) override {
    std::lock_guard lock(out_->mu);
    if (out_->closed) throw Error(ErrorCode::kChannelClosed, "loopback peer closed");
    out_->frames.push_back(frame);
    out_->cv.notify_one();
  }

  Bytes recv_frame(std::optional<std::chrono::milliseconds> timeout) override {
    std::unique_lock lock(in_->mu);
    auto ready = [&] { return !in_->frames.empty() || in_->closed; };
    if (timeout) {
      if (!in_->cv.wait_for(lock, *timeout, ready)) throw Error(ErrorCode::kBarrierTimeout, "recv timed out");
    } else {
      in_->cv.wait(lock, ready);
    }
    if (in_->frames.empty()) throw Error(ErrorCode::kChannelClosed, "loopback channel closed");
    Bytes f = std::move(in_->frames.front());
    in_->frames.pop_front();
    return f;
  }

  void close() override {
    for (auto* q : {in_.get(), out_.get()}) {
      std::lock_guard lock(q->mu);
      q->closed = true;
      q->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<transport_detail::Queue> in_;
  std::shared_ptr<transport_detail::Queue> out_;
};

inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_loopback_pair() {
  auto ab = std::make_shared<transport_detail::Queue>();
  auto ba = std::make_shared<transport_detail::Queue>();
  return {std::make_unique<LoopbackChannel>(ba, ab), std::make_unique<LoopbackChannel>(ab, ba)};
}

// ---------------------------------------------------------------------------

class TcpChannel final : public Channel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~TcpChannel() override {
    close();
  }
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;

  void send_frame(const Bytes& frame) override {
    std::lock_guard lock(send_mu_);
    std::size_t off = 0;
    while (off < frame.size()) {
      const ssize_t n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorCode::kChannelClosed, std::string("tcp send: ") + std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
  }

  Bytes recv_frame(std::optional<std::chrono::milliseconds> timeout) override {
    std::lock_guard lock(recv_mu_);
    const auto deadline = timeout ? std::optional(Clock::now() + *timeout) : std::nullopt;
    Bytes frame(kFrameHeaderSize);
    read_exact(frame.data(), kFrameHeaderSize, deadline);
    // length checks happen before allocating the body
    const FrameHeader hdr = parse_header(frame);
    frame.resize(kFrameHeaderSize + hdr.body_len);
    read_exact(frame.data() + kFrameHeaderSize, hdr.body_len, deadline);
    return frame;
  }

  void close() override {
    std::lock_guard lock(close_mu_);
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t len, std::optional<Clock::time_point> deadline) {
    std::size_t off = 0;
    while (off < len) {
      if (deadline) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(*deadline - Clock::now());
        pollfd p{fd_, POLLIN, 0};
        const int r = ::poll(&p, 1, static_cast<int>(std::max<std::int64_t>(0, left.count())));
        if (r == 0) throw Error(ErrorCode::kBarrierTimeout, "recv timed out");
        if (r < 0 && errno != EINTR) throw Error(ErrorCode::kChannelClosed, "poll failed");
        if (r < 0) continue;
      }
      const ssize_t n = ::recv(fd_, dst + off, len - off, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorCode::kChannelClosed, "tcp peer closed after " + std::to_string(off) + " bytes");
      off += static_cast<std::size_t>(n);
    }
  }

  int fd_;
  std::mutex send_mu_;
  std::mutex recv_mu_;
  std::mutex close_mu_;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  static Endpoint parse(std::string_view s) {
    const auto colon = s.rfind(':');
    if (colon == std::string_view::npos) throw Error(ErrorCode::kConfig, "endpoint must be host:port");
    Endpoint e;
    e.host = std::string(s.substr(0, colon));
    const std::string port(s.substr(colon + 1));
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(port, &used);
      if (used != port.size() || v > 65535) throw std::out_of_range("port");
      e.port = static_cast<std::uint16_t>(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfig, "bad port in endpoint '" + std::string(s) + "'");
    }
    if (e.host.empty()) throw Error(ErrorCode::kConfig, "empty host in endpoint");
    return e;
  }

  std::string str() const { return host + ":" + std::to_string(port); }
};

class TcpListener {
 public:
  // Port 0 binds an ephemeral port, readable through port().
  explicit TcpListener(const Endpoint& ep) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw Error(ErrorCode::kChannelClosed, "socket failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(ep.port);
    if (::inet_pton(AF_INET, ep.host == "localhost" ? "127.0.0.1" : ep.host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw Error(ErrorCode::kConfig, "listener host must be an IPv4 address: " + ep.host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd_, 64) != 0) {
      const std::string err = std::strerror(errno);
      ::close(fd_);
      throw Error(ErrorCode::kChannelClosed, "bind/listen on " + ep.str() + ": " + err);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }

  std::unique_ptr<Channel> accept(std::chrono::milliseconds timeout = std::chrono::milliseconds(30000)) {
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (r <= 0) throw Error(ErrorCode::kBarrierTimeout, "no tcp client connected");
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c < 0) throw Error(ErrorCode::kChannelClosed, std::string("accept: ") + std::strerror(errno));
    return std::make_unique<TcpChannel>(c);
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

inline std::unique_ptr<Channel> tcp_connect(const Endpoint& ep) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), std::to_string(ep.port).c_str(), &hints, &res) != 0 || res == nullptr) {
    throw Error(ErrorCode::kConfig, "cannot resolve " + ep.host);
  }
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd < 0 || ::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
    const std::string err = std::strerror(errno);
    if (fd >= 0) ::close(fd);
    ::freeaddrinfo(res);
    throw Error(ErrorCode::kChannelClosed, "connect to " + ep.str() + ": " + err);
  }
  ::freeaddrinfo(res);
  return std::make_unique<TcpChannel>(fd);
}

// Connected pair over a local TCP socket, for symmetric use with loopback.
inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_tcp_pair(const std::string& host = "127.0.0.1") {
  TcpListener listener(Endpoint{host, 0});
  auto client = tcp_connect(Endpoint{host, listener.port()});
  auto server = listener.accept();
  return {std::move(client), std::move(server)};
}

inline std::pair<std::unique_ptr<Channel>, std::unique_ptr<Channel>> make_channel_pair(TransportKind kind) {
  return kind == TransportKind::kTcp ? make_tcp_pair() : make_loopback_pair();
}

}  // namespace flsplit
