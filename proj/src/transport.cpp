#include "fedenergy/transport.hpp"

#include <fmt/format.h>

#include "fedenergy/errors.hpp"
#include "fedenergy/wire.hpp"

namespace fedenergy::wire {

void MessageQueue::push(Bytes msg) {
  {
    std::lock_guard lock(mu_);
    if (closed_) return;
    items_.push_back(std::move(msg));
  }
  cv_.notify_all();
}

Bytes MessageQueue::pop(std::optional<Millis> timeout) {
  std::unique_lock lock(mu_);
  auto ready = [&] { return !items_.empty() || closed_.has_value(); };
  if (timeout) {
    if (!cv_.wait_for(lock, *timeout, ready)) {
      throw TimeoutError(fmt::format("no message within {} ms", timeout->count()));
    }
  } else {
    cv_.wait(lock, ready);
  }
  if (items_.empty()) throw ConnectionError(*closed_, 0);
  Bytes msg = std::move(items_.front());
  items_.pop_front();
  return msg;
}

std::optional<Bytes> MessageQueue::try_pop() {
  std::lock_guard lock(mu_);
  if (items_.empty()) return std::nullopt;
  Bytes msg = std::move(items_.front());
  items_.pop_front();
  return msg;
}

void MessageQueue::close(std::string reason) {
  {
    std::lock_guard lock(mu_);
    if (!closed_) closed_ = std::move(reason);
  }
  cv_.notify_all();
}

std::uint64_t TopicRouter::subscribe(const std::string& topic, Sink sink) {
  std::lock_guard lock(mu_);
  const auto id = next_id_++;
  if (auto it = retained_.find(topic); it != retained_.end()) sink(it->second);
  subs_.emplace(id, std::make_pair(topic, std::move(sink)));
  return id;
}

void TopicRouter::unsubscribe(std::uint64_t id) {
  std::lock_guard lock(mu_);
  subs_.erase(id);
}

void TopicRouter::publish(const std::string& topic, std::span<const std::uint8_t> message) {
  const Bytes copy(message.begin(), message.end());
  std::lock_guard lock(mu_);
  if (Topic::parse(topic).kind == TopicKind::Global) retained_[topic] = copy;
  for (auto& [id, entry] : subs_) {
    if (entry.first == topic) entry.second(copy);
  }
}

std::size_t TopicRouter::subscriber_count(const std::string& topic) const {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (const auto& [id, entry] : subs_) n += entry.first == topic;
  return n;
}

std::optional<Bytes> TopicRouter::retained(const std::string& topic) const {
  std::lock_guard lock(mu_);
  if (auto it = retained_.find(topic); it != retained_.end()) return it->second;
  return std::nullopt;
}

namespace {

class LoopbackSubscription final : public Subscription {
 public:
  LoopbackSubscription(std::shared_ptr<TopicRouter> router, std::string topic)
      : router_(std::move(router)), topic_(std::move(topic)), queue_(std::make_shared<MessageQueue>()) {
    id_ = router_->subscribe(topic_, [q = queue_](const Bytes& m) { q->push(m); });
  }
  ~LoopbackSubscription() override { router_->unsubscribe(id_); }

  Bytes receive(std::optional<Millis> timeout) override { return queue_->pop(timeout); }
  std::optional<Bytes> poll() override { return queue_->try_pop(); }
  const std::string& topic() const override { return topic_; }

 private:
  std::shared_ptr<TopicRouter> router_;
  std::string topic_;
  std::shared_ptr<MessageQueue> queue_;
  std::uint64_t id_ = 0;
};

class LoopbackTransport final : public Transport {
 public:
  explicit LoopbackTransport(std::shared_ptr<TopicRouter> router) : router_(std::move(router)) {}

  void publish(const std::string& topic, std::span<const std::uint8_t> message) override {
    router_->publish(topic, message);
  }

  std::unique_ptr<Subscription> subscribe(const std::string& topic) override {
    Topic::parse(topic);
    return std::make_unique<LoopbackSubscription>(router_, topic);
  }

 private:
  std::shared_ptr<TopicRouter> router_;
};

}  // namespace

LoopbackBroker::LoopbackBroker() : router_(std::make_shared<TopicRouter>()) {}

std::unique_ptr<Transport> LoopbackBroker::connect() {
  return std::make_unique<LoopbackTransport>(router_);
}

}  // namespace fedenergy::wire
