#include "sfl/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <thread>

namespace sfl {

void Connection::send(const Message& m) {
  auto frame = encode_frame(m);
  const auto n = frame.size();
  send_frame(std::move(frame));
  stats_.frames_sent += 1;
  stats_.bytes_sent += n;
}

Message Connection::recv() {
  auto frame = recv_frame();
  stats_.frames_received += 1;
  stats_.bytes_received += frame.size();
  return decode_message(frame);
}

namespace {

class FrameQueue {
 public:
  explicit FrameQueue(std::size_t capacity) : capacity_(capacity) {}

  void push(std::vector<std::uint8_t> frame) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || q_.size() < capacity_; });
    if (closed_) throw TransportError("inproc: peer endpoint is closed");
    q_.push_back(std::move(frame));
    not_empty_.notify_one();
  }

  std::vector<std::uint8_t> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !q_.empty(); });
    if (q_.empty()) throw TransportError("inproc: connection closed");
    auto f = std::move(q_.front());
    q_.pop_front();
    not_full_.notify_one();
    return f;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<std::vector<std::uint8_t>> q_;
  bool closed_ = false;
};

class InprocConnection final : public Connection {
 public:
  InprocConnection(std::shared_ptr<FrameQueue> out, std::shared_ptr<FrameQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}
  ~InprocConnection() override { close(); }

  void close() override {
    out_->close();
    in_->close();
  }

 protected:
  void send_frame(std::vector<std::uint8_t> frame) override { out_->push(std::move(frame)); }
  std::vector<std::uint8_t> recv_frame() override { return in_->pop(); }

 private:
  std::shared_ptr<FrameQueue> out_, in_;
};

std::string errno_text() { return std::strerror(errno); }

class TcpConnection final : public Connection {
 public:
  explicit TcpConnection(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpConnection() override {
    close();
    ::close(fd_);
  }

  // Safe to call from another thread to unblock a pending recv.
  void close() override {
    if (!closed_.exchange(true)) ::shutdown(fd_, SHUT_RDWR);
  }

 protected:
  void send_frame(std::vector<std::uint8_t> frame) override {
    if (closed_) throw TransportError("tcp: send on a closed connection");
    std::size_t off = 0;
    while (off < frame.size()) {
      const auto n = ::send(fd_, frame.data() + off, frame.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError("tcp send: " + errno_text());
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::vector<std::uint8_t> recv_frame() override {
    std::vector<std::uint8_t> frame(kFrameHeaderSize);
    read_exact(frame.data(), kFrameHeaderSize);
    // Validates magic, version and tag before trusting the length.
    decode_frame(std::span<const std::uint8_t>(frame.data(), 4));
    std::uint32_t len;
    std::memcpy(&len, frame.data() + 12, 4);
    frame.resize(kFrameHeaderSize + len);
    read_exact(frame.data() + kFrameHeaderSize, len);
    return frame;
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t n) {
    if (closed_) throw TransportError("tcp: recv on a closed connection");
    std::size_t off = 0;
    while (off < n) {
      const auto r = ::recv(fd_, dst + off, n - off, 0);
      if (r == 0) throw TransportError("tcp: connection closed by peer");
      if (r < 0) {
        if (errno == EINTR) continue;
        throw TransportError("tcp recv: " + errno_text());
      }
      off += static_cast<std::size_t>(r);
    }
  }

  int fd_;
  std::atomic<bool> closed_{false};
};

addrinfo* resolve(const TcpAddress& a, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const auto port = std::to_string(a.port);
  const int rc = ::getaddrinfo(a.host.empty() ? nullptr : a.host.c_str(), port.c_str(), &hints, &res);
  if (rc != 0) throw TransportError("cannot resolve '" + a.host + "': " + ::gai_strerror(rc));
  return res;
}

}  // namespace

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_inproc_pair(std::size_t capacity) {
  if (capacity == 0) throw ContractError("inproc: capacity must be >= 1");
  auto ab = std::make_shared<FrameQueue>(capacity);
  auto ba = std::make_shared<FrameQueue>(capacity);
  return {std::make_unique<InprocConnection>(ab, ba), std::make_unique<InprocConnection>(ba, ab)};
}

TcpAddress parse_tcp_address(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon + 1 == text.size())
    throw ConfigError("tcp address '" + text + "' is not host:port");
  TcpAddress a;
  a.host = text.substr(0, colon);
  const auto port_text = text.substr(colon + 1);
  for (char c : port_text)
    if (c < '0' || c > '9') throw ConfigError("tcp address '" + text + "' has a non-numeric port");
  const long port = std::stol(port_text);
  if (port > 65535) throw ConfigError("tcp address '" + text + "' port out of range");
  a.port = static_cast<std::uint16_t>(port);
  return a;
}

TcpListener::TcpListener(const TcpAddress& address) {
  addrinfo* res = resolve(address, true);
  fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (fd_ < 0) {
    ::freeaddrinfo(res);
    throw TransportError("tcp socket: " + errno_text());
  }
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(fd_, res->ai_addr, res->ai_addrlen) != 0 || ::listen(fd_, 64) != 0) {
    const auto msg = errno_text();
    ::freeaddrinfo(res);
    ::close(fd_);
    throw TransportError("tcp listen on " + address.host + ":" + std::to_string(address.port) + ": " + msg);
  }
  ::freeaddrinfo(res);
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Connection> TcpListener::accept() {
  for (;;) {
    const int c = ::accept(fd_, nullptr, nullptr);
    if (c >= 0) return std::make_unique<TcpConnection>(c);
    if (errno != EINTR) throw TransportError("tcp accept: " + errno_text());
  }
}

std::unique_ptr<Connection> tcp_connect(const TcpAddress& address, int timeout_ms) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  for (;;) {
    addrinfo* res = resolve(address, false);
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) {
      ::freeaddrinfo(res);
      throw TransportError("tcp socket: " + errno_text());
    }
    const int rc = ::connect(fd, res->ai_addr, res->ai_addrlen);
    const int err = errno;
    ::freeaddrinfo(res);
    if (rc == 0) return std::make_unique<TcpConnection>(fd);
    ::close(fd);
    if (err != ECONNREFUSED || std::chrono::steady_clock::now() >= deadline)
      throw TransportError("tcp connect to " + address.host + ":" + std::to_string(address.port) + ": " +
                           std::strerror(err));
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
}

}  // namespace sfl
