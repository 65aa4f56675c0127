#pragma once

// Topic-based publish/subscribe. Two implementations share these semantics:
// an in-process loopback (deterministic simulation) and a TCP broker/client
// pair (tcp.hpp) for multi-process runs.
//
//  * every current subscriber of a topic receives each publish (fan-out);
//  * messages from one publisher arrive in publish order;
//  * the latest message on each fed/<network>/global topic is retained and
//    handed to subscribers that join later;
//  * receive() blocks until a message arrives or the deadline passes.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedenergy::wire {

using Bytes = std::vector<std::uint8_t>;
using Millis = std::chrono::milliseconds;

class Subscription {
 public:
  virtual ~Subscription() = default;
  // Blocks until a message arrives. Throws TimeoutError once `timeout`
  // elapses and ConnectionError if the transport goes away.
  virtual Bytes receive(std::optional<Millis> timeout = std::nullopt) = 0;
  // Non-blocking: the next queued message, if any.
  virtual std::optional<Bytes> poll() = 0;
  virtual const std::string& topic() const = 0;
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void publish(const std::string& topic, std::span<const std::uint8_t> message) = 0;
  virtual std::unique_ptr<Subscription> subscribe(const std::string& topic) = 0;
};

// Unbounded FIFO with blocking pop; close() wakes waiters with ConnectionError.
class MessageQueue {
 public:
  void push(Bytes msg);
  Bytes pop(std::optional<Millis> timeout);
  std::optional<Bytes> try_pop();
  void close(std::string reason);

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Bytes> items_;
  std::optional<std::string> closed_;
};

// Topic table shared by the loopback transport and the TCP broker. Sinks are
// called with the router lock held, which serializes deliveries per topic.
class TopicRouter {
 public:
  using Sink = std::function<void(const Bytes&)>;

  std::uint64_t subscribe(const std::string& topic, Sink sink);
  void unsubscribe(std::uint64_t id);
  void publish(const std::string& topic, std::span<const std::uint8_t> message);

  std::size_t subscriber_count(const std::string& topic) const;
  std::optional<Bytes> retained(const std::string& topic) const;

 private:
  mutable std::mutex mu_;
  std::uint64_t next_id_ = 1;
  std::map<std::uint64_t, std::pair<std::string, Sink>> subs_;
  std::map<std::string, Bytes> retained_;
};

// In-process broker: connect() hands out transports sharing one router.
class LoopbackBroker {
 public:
  LoopbackBroker();
  std::unique_ptr<Transport> connect();
  TopicRouter& router() { return *router_; }

 private:
  std::shared_ptr<TopicRouter> router_;
};

}  // namespace fedenergy::wire
