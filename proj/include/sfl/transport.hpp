#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>

#include "sfl/wire.hpp"

namespace sfl {

struct ConnectionStats {
  std::atomic<std::uint64_t> frames_sent{0};
  std::atomic<std::uint64_t> frames_received{0};
  std::atomic<std::uint64_t> bytes_sent{0};
  std::atomic<std::uint64_t> bytes_received{0};
};

// One end of an ordered, reliable, framed, full-duplex link. Single owner;
// send and recv may be called from the owning context only.
class Connection {
 public:
  virtual ~Connection() = default;

  void send(const Message& m);
  // Blocks until a whole frame arrives. TransportError once the peer is gone.
  Message recv();
  virtual void close() = 0;

  const ConnectionStats& stats() const { return stats_; }

 protected:
  virtual void send_frame(std::vector<std::uint8_t> frame) = 0;
  virtual std::vector<std::uint8_t> recv_frame() = 0;

 private:
  ConnectionStats stats_;
};

// Two connected in-process endpoints. Each direction buffers at most
// `capacity` frames; senders block beyond that.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_inproc_pair(std::size_t capacity = 16);

struct TcpAddress {
  std::string host;
  std::uint16_t port = 0;
};

// "host:port"; throws ConfigError when malformed.
TcpAddress parse_tcp_address(const std::string& text);

class TcpListener {
 public:
  explicit TcpListener(const TcpAddress& address);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::uint16_t port() const { return port_; }
  std::unique_ptr<Connection> accept();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

// Retries refused connections for up to `timeout_ms`.
std::unique_ptr<Connection> tcp_connect(const TcpAddress& address, int timeout_ms = 10000);

}  // namespace sfl
