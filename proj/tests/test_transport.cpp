#include <gtest/gtest.h>

#include <thread>

#include "sfl/transport.hpp"

using namespace sfl;

namespace {

Message numbered(std::uint32_t i) {
  Message m;
  m.tag = MessageTag::activation;
  m.batch_id = i;
  m.tensors.push_back({"x", Tensor::full({3}, static_cast<double>(i))});
  return m;
}

}  // namespace

TEST(Inproc, DeliversInOrder) {
  auto [a, b] = make_inproc_pair(4);
  std::thread sender([&a] {
    for (std::uint32_t i = 0; i < 100; ++i) a->send(numbered(i));
  });
  for (std::uint32_t i = 0; i < 100; ++i) {
    auto m = b->recv();
    EXPECT_EQ(m.batch_id, i);
    EXPECT_EQ(m.tensors[0].tensor.at(2), static_cast<double>(i));
  }
  sender.join();
  EXPECT_EQ(a->stats().frames_sent.load(), 100u);
  EXPECT_EQ(b->stats().frames_received.load(), 100u);
  EXPECT_EQ(a->stats().bytes_sent.load(), b->stats().bytes_received.load());
}

TEST(Inproc, ClosedPeerFailsSend) {
  auto [a, b] = make_inproc_pair();
  b->close();
  EXPECT_THROW(a->send(numbered(0)), TransportError);
  EXPECT_THROW(a->recv(), TransportError);
}

TEST(Inproc, CloseUnblocksReceiver) {
  auto [a, b] = make_inproc_pair();
  std::thread closer([&a] {
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    a->close();
  });
  EXPECT_THROW(b->recv(), TransportError);
  closer.join();
}

TEST(Tcp, LoopbackRoundTrip) {
  TcpListener listener({"127.0.0.1", 0});
  ASSERT_NE(listener.port(), 0);
  std::unique_ptr<Connection> server;
  std::thread acceptor([&] { server = listener.accept(); });
  auto client = tcp_connect({"127.0.0.1", listener.port()});
  acceptor.join();
  for (std::uint32_t i = 0; i < 20; ++i) client->send(numbered(i));
  for (std::uint32_t i = 0; i < 20; ++i) EXPECT_EQ(server->recv().batch_id, i);
  Message reply;
  reply.text = "ok";
  server->send(reply);
  EXPECT_EQ(client->recv().text, "ok");
  EXPECT_EQ(client->stats().bytes_sent.load(), server->stats().bytes_received.load());
}

TEST(Tcp, PeerCloseIsTransportError) {
  TcpListener listener({"127.0.0.1", 0});
  std::unique_ptr<Connection> server;
  std::thread acceptor([&] { server = listener.accept(); });
  auto client = tcp_connect({"127.0.0.1", listener.port()});
  acceptor.join();
  server->close();
  EXPECT_THROW(client->recv(), TransportError);
  // A reset may need a couple of writes to surface.
  EXPECT_THROW(
      {
        for (int i = 0; i < 50; ++i) client->send(numbered(static_cast<std::uint32_t>(i)));
      },
      TransportError);
}

TEST(Tcp, RefusedConnectTimesOut) {
  std::uint16_t port;
  {
    TcpListener probe({"127.0.0.1", 0});
    port = probe.port();
  }
  EXPECT_THROW(tcp_connect({"127.0.0.1", port}, 200), TransportError);
}

TEST(Tcp, AddressParsing) {
  auto a = parse_tcp_address("10.0.0.1:5555");
  EXPECT_EQ(a.host, "10.0.0.1");
  EXPECT_EQ(a.port, 5555);
  EXPECT_THROW(parse_tcp_address("nohost"), ConfigError);
  EXPECT_THROW(parse_tcp_address("h:99999"), ConfigError);
  EXPECT_THROW(parse_tcp_address("h:abc"), ConfigError);
}
