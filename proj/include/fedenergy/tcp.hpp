#pragma once

// Minimal TCP pub/sub broker and client.
//
// Every frame on the socket is `u32 length | body`; body starts with a verb:
//   CONNECT  1 | u16 len | client id          -> CONNACK 2
//   SUB      3 | u32 sub id | u16 len | topic -> SUBACK  4 | u32 sub id
//   PUB      5 | u16 len | topic | message
//   MSG      6 | u32 sub id | message          (broker -> client)
//   UNSUB    7 | u32 sub id
//   ERROR    8 | text                          (broker -> client, then close)

#include <atomic>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "fedenergy/transport.hpp"

namespace fedenergy::wire {

struct Address {
  std::string host = "127.0.0.1";
  std::uint16_t port = 1884;

  static Address parse(const std::string& text);  // "host:port"
  std::string str() const;
};

inline constexpr std::uint32_t kMaxFrameBytes = 256u << 20;

class TcpBroker {
 public:
  explicit TcpBroker(Address bind);
  ~TcpBroker();
  TcpBroker(const TcpBroker&) = delete;
  TcpBroker& operator=(const TcpBroker&) = delete;

  // Binds and starts accepting; port 0 picks an ephemeral port.
  void start();
  void stop();
  std::uint16_t port() const { return port_; }
  TopicRouter& router() { return router_; }

 private:
  struct Connection;
  void accept_loop();
  void serve(std::shared_ptr<Connection> conn);

  Address bind_;
  std::uint16_t port_ = 0;
  int listen_fd_ = -1;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  TopicRouter router_;
  std::mutex conns_mu_;
  std::list<std::pair<std::shared_ptr<Connection>, std::thread>> conns_;
};

struct ConnectOptions {
  std::string client_id = "client";
  int max_retries = 20;
  Millis retry_delay{100};
};

// Connects (retrying up to max_retries) and completes the CONNECT handshake.
// Throws ConnectionError carrying the retry count when the broker is unreachable.
std::unique_ptr<Transport> connect_tcp(const Address& broker, const ConnectOptions& options = {});

}  // namespace fedenergy::wire
