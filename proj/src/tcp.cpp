#include "fedenergy/tcp.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <condition_variable>
#include <cstring>
#include <map>
#include <set>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "bytes.hpp"
#include "fedenergy/errors.hpp"
#include "fedenergy/wire.hpp"

namespace fedenergy::wire {

namespace {

enum Verb : std::uint8_t {
  kConnect = 1,
  kConnAck = 2,
  kSub = 3,
  kSubAck = 4,
  kPub = 5,
  kMsg = 6,
  kUnsub = 7,
  kError = 8,
};

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }

  int fd() const { return fd_; }
  void shutdown_both() const {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

bool write_all(int fd, const std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) return false;
    data += w;
    n -= static_cast<std::size_t>(w);
  }
  return true;
}

bool read_all(int fd, std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    const ssize_t r = ::recv(fd, data, n, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return false;
    data += r;
    n -= static_cast<std::size_t>(r);
  }
  return true;
}

bool write_frame(int fd, std::span<const std::uint8_t> body) {
  std::uint8_t len[4];
  const auto n = static_cast<std::uint32_t>(body.size());
  std::memcpy(len, &n, 4);
  return write_all(fd, len, 4) && write_all(fd, body.data(), body.size());
}

// Returns nullopt on EOF or socket error; throws LengthError on oversize frames.
std::optional<Bytes> read_frame(int fd) {
  std::uint8_t len[4];
  if (!read_all(fd, len, 4)) return std::nullopt;
  std::uint32_t n;
  std::memcpy(&n, len, 4);
  if (n == 0 || n > kMaxFrameBytes) throw LengthError(fmt::format("frame of {} bytes", n));
  Bytes body(n);
  if (!read_all(fd, body.data(), n)) return std::nullopt;
  return body;
}

Bytes sub_frame(Verb verb, std::uint32_t id, std::span<const std::uint8_t> tail) {
  detail::ByteWriter w;
  w.u8(verb);
  w.u32(id);
  w.bytes(tail);
  return w.take();
}

Bytes string_frame(Verb verb, std::string_view s) {
  detail::ByteWriter w;
  w.u8(verb);
  w.u16(static_cast<std::uint16_t>(s.size()));
  w.str(s);
  return w.take();
}

Socket dial(const Address& addr) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const auto port = std::to_string(addr.port);
  if (::getaddrinfo(addr.host.c_str(), port.c_str(), &hints, &res) != 0 || !res) return {};
  Socket result;
  for (auto* ai = res; ai; ai = ai->ai_next) {
    Socket s(::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol));
    if (s.fd() < 0) continue;
    if (::connect(s.fd(), ai->ai_addr, ai->ai_addrlen) == 0) {
      int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      result = std::move(s);
      break;
    }
  }
  ::freeaddrinfo(res);
  return result;
}

}  // namespace

Address Address::parse(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw ConfigError(fmt::format("broker address '{}' is not host:port", text));
  }
  Address a;
  a.host = text.substr(0, colon);
  unsigned port = 0;
  const auto* begin = text.data() + colon + 1;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, port);
  if (ec != std::errc{} || ptr != end || port > 65535) {
    throw ConfigError(fmt::format("bad port in broker address '{}'", text));
  }
  a.port = static_cast<std::uint16_t>(port);
  return a;
}

std::string Address::str() const { return fmt::format("{}:{}", host, port); }

// ---- broker -----------------------------------------------------------------

struct TcpBroker::Connection {
  Socket sock;
  std::mutex write_mu;
  std::string client_id;
  std::map<std::uint32_t, std::uint64_t> subs;  // client sub id -> router id

  bool send(std::span<const std::uint8_t> body) {
    std::lock_guard lock(write_mu);
    return write_frame(sock.fd(), body);
  }
};

TcpBroker::TcpBroker(Address bind) : bind_(std::move(bind)) {}

TcpBroker::~TcpBroker() { stop(); }

void TcpBroker::start() {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const auto port = std::to_string(bind_.port);
  if (::getaddrinfo(bind_.host.c_str(), port.c_str(), &hints, &res) != 0 || !res) {
    throw ConnectionError(fmt::format("cannot resolve {}", bind_.str()), 0);
  }
  listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const bool ok = listen_fd_ >= 0 && ::bind(listen_fd_, res->ai_addr, res->ai_addrlen) == 0 &&
                  ::listen(listen_fd_, 64) == 0;
  ::freeaddrinfo(res);
  if (!ok) {
    const std::string err = std::strerror(errno);
    if (listen_fd_ >= 0) ::close(listen_fd_);
    listen_fd_ = -1;
    throw ConnectionError(fmt::format("cannot listen on {}: {}", bind_.str(), err), 0);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
  spdlog::info("broker listening on {}:{}", bind_.host, port_);
}

void TcpBroker::stop() {
  if (!running_.exchange(false)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  listen_fd_ = -1;
  if (acceptor_.joinable()) acceptor_.join();
  std::list<std::pair<std::shared_ptr<Connection>, std::thread>> conns;
  {
    std::lock_guard lock(conns_mu_);
    conns.swap(conns_);
  }
  for (auto& [conn, th] : conns) conn->sock.shutdown_both();
  for (auto& [conn, th] : conns) {
    if (th.joinable()) th.join();
  }
}

void TcpBroker::accept_loop() {
  while (running_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (errno == EINTR) continue;
      break;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    auto conn = std::make_shared<Connection>();
    conn->sock = Socket(fd);
    std::lock_guard lock(conns_mu_);
    if (!running_) break;
    conns_.emplace_back(conn, std::thread([this, conn] { serve(conn); }));
  }
}

void TcpBroker::serve(std::shared_ptr<Connection> conn) {
  std::weak_ptr<Connection> weak = conn;
  auto fail = [&](const std::string& why) {
    spdlog::warn("broker: dropping client '{}': {}", conn->client_id, why);
    detail::ByteWriter w;
    w.u8(kError);
    w.str(why);
    conn->send(w.take());
  };
  try {
    while (auto frame = read_frame(conn->sock.fd())) {
      detail::ByteReader r(*frame);
      switch (r.u8()) {
        case kConnect: {
          conn->client_id = r.str(r.u16());
          const std::uint8_t ack[] = {kConnAck};
          conn->send(ack);
          break;
        }
        case kSub: {
          const std::uint32_t sub_id = r.u32();
          const std::string topic = r.str(r.u16());
          Topic::parse(topic);
          // The sink holds a weak reference so a dead connection is skipped.
          const auto rid = router_.subscribe(topic, [weak, sub_id](const Bytes& m) {
            if (auto c = weak.lock()) c->send(sub_frame(kMsg, sub_id, m));
          });
          conn->subs[sub_id] = rid;
          conn->send(sub_frame(kSubAck, sub_id, {}));
          break;
        }
        case kUnsub: {
          const std::uint32_t sub_id = r.u32();
          if (auto it = conn->subs.find(sub_id); it != conn->subs.end()) {
            router_.unsubscribe(it->second);
            conn->subs.erase(it);
          }
          break;
        }
        case kPub: {
          const std::string topic = r.str(r.u16());
          router_.publish(topic, r.bytes(r.remaining()));
          break;
        }
        default:
          throw ProtocolError("unknown verb");
      }
    }
  } catch (const Error& e) {
    fail(e.what());
  }
  for (const auto& [sub_id, rid] : conn->subs) router_.unsubscribe(rid);
  conn->subs.clear();
  conn->sock.shutdown_both();
}

// ---- client -----------------------------------------------------------------

namespace {

class TcpClient : public std::enable_shared_from_this<TcpClient> {
 public:
  explicit TcpClient(Socket sock) : sock_(std::move(sock)) {}

  ~TcpClient() {
    sock_.shutdown_both();
    if (reader_.joinable()) reader_.join();
  }

  void start(const std::string& client_id) {
    reader_ = std::thread([this] { read_loop(); });
    send(string_frame(kConnect, client_id));
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, std::chrono::seconds(10), [&] { return connected_ || dead_; }) ||
        dead_) {
      throw ConnectionError("broker did not acknowledge CONNECT", 0);
    }
  }

  void send(std::span<const std::uint8_t> body) {
    std::lock_guard lock(write_mu_);
    if (!write_frame(sock_.fd(), body)) throw ConnectionError("lost connection to broker", 0);
  }

  std::pair<std::uint32_t, std::shared_ptr<MessageQueue>> add_subscription(const std::string& topic) {
    auto queue = std::make_shared<MessageQueue>();
    std::uint32_t id;
    {
      std::lock_guard lock(mu_);
      if (dead_) throw ConnectionError("lost connection to broker", 0);
      id = next_sub_++;
      queues_[id] = queue;
    }
    detail::ByteWriter w;
    w.u8(kSub);
    w.u32(id);
    w.u16(static_cast<std::uint16_t>(topic.size()));
    w.str(topic);
    send(w.take());
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, std::chrono::seconds(10),
                      [&] { return acked_.contains(id) || dead_; }) ||
        !acked_.contains(id)) {
      throw ConnectionError(fmt::format("broker did not acknowledge subscription to {}", topic), 0);
    }
    return {id, queue};
  }

  void remove_subscription(std::uint32_t id) {
    {
      std::lock_guard lock(mu_);
      queues_.erase(id);
      acked_.erase(id);
      if (dead_) return;
    }
    try {
      send(sub_frame(kUnsub, id, {}));
    } catch (const ConnectionError&) {
    }
  }

 private:
  void read_loop() {
    std::string reason = "broker closed the connection";
    try {
      while (auto frame = read_frame(sock_.fd())) {
        detail::ByteReader r(*frame);
        const auto verb = r.u8();
        std::lock_guard lock(mu_);
        if (verb == kConnAck) {
          connected_ = true;
        } else if (verb == kSubAck) {
          acked_.insert(r.u32());
        } else if (verb == kMsg) {
          const auto id = r.u32();
          const auto body = r.bytes(r.remaining());
          if (auto it = queues_.find(id); it != queues_.end()) it->second->push({body.begin(), body.end()});
        } else if (verb == kError) {
          reason = "broker error: " + r.str(r.remaining());
          break;
        }
        cv_.notify_all();
      }
    } catch (const Error& e) {
      reason = e.what();
    }
    std::lock_guard lock(mu_);
    dead_ = true;
    for (auto& [id, q] : queues_) q->close(reason);
    cv_.notify_all();
  }

  Socket sock_;
  std::mutex write_mu_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool connected_ = false;
  bool dead_ = false;
  std::uint32_t next_sub_ = 1;
  std::map<std::uint32_t, std::shared_ptr<MessageQueue>> queues_;
  std::set<std::uint32_t> acked_;
  std::thread reader_;
};

class TcpSubscription final : public Subscription {
 public:
  TcpSubscription(std::shared_ptr<TcpClient> client, std::string topic)
      : client_(std::move(client)), topic_(std::move(topic)) {
    std::tie(id_, queue_) = client_->add_subscription(topic_);
  }
  ~TcpSubscription() override { client_->remove_subscription(id_); }

  Bytes receive(std::optional<Millis> timeout) override { return queue_->pop(timeout); }
  std::optional<Bytes> poll() override { return queue_->try_pop(); }
  const std::string& topic() const override { return topic_; }

 private:
  std::shared_ptr<TcpClient> client_;
  std::string topic_;
  std::uint32_t id_ = 0;
  std::shared_ptr<MessageQueue> queue_;
};

class TcpTransport final : public Transport {
 public:
  explicit TcpTransport(std::shared_ptr<TcpClient> client) : client_(std::move(client)) {}

  void publish(const std::string& topic, std::span<const std::uint8_t> message) override {
    Topic::parse(topic);
    detail::ByteWriter w;
    w.u8(kPub);
    w.u16(static_cast<std::uint16_t>(topic.size()));
    w.str(topic);
    w.bytes(message);
    client_->send(w.take());
  }

  std::unique_ptr<Subscription> subscribe(const std::string& topic) override {
    Topic::parse(topic);
    return std::make_unique<TcpSubscription>(client_, topic);
  }

 private:
  std::shared_ptr<TcpClient> client_;
};

}  // namespace

std::unique_ptr<Transport> connect_tcp(const Address& broker, const ConnectOptions& options) {
  int attempt = 0;
  while (true) {
    Socket s = dial(broker);
    if (s.fd() >= 0) {
      auto client = std::make_shared<TcpClient>(std::move(s));
      client->start(options.client_id);
      return std::make_unique<TcpTransport>(std::move(client));
    }
    if (attempt >= options.max_retries) {
      throw ConnectionError(fmt::format("broker {} unreachable", broker.str()), attempt);
    }
    ++attempt;
    std::this_thread::sleep_for(options.retry_delay);
  }
}

}  // namespace fedenergy::wire
