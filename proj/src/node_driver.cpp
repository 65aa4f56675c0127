#include "fedenergy/node_driver.hpp"

#include <map>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "fedenergy/errors.hpp"

namespace fedenergy::node {

namespace {

// Blocks until the global model for the worker's round arrives and applies it.
ReceiveResult await_global(Worker& worker, wire::Subscription& sub,
                           const WorkerDriverOptions& options) {
  while (true) {
    const auto msg = wire::decode_message(sub.receive(options.global_timeout));
    if (msg.kind != wire::MessageKind::GlobalModel) continue;
    try {
      return worker.receive_global(wire::to_global_model(msg));
    } catch (const StaleModelError& e) {
      spdlog::info("{}", e.what());
    }
  }
}

}  // namespace

WorkerRun run_worker(Worker& worker, wire::Transport& transport,
                     std::span<const data::HourlyRecord> records,
                     const WorkerDriverOptions& options) {
  const auto updates = wire::updates_topic(options.network);
  auto global_sub = transport.subscribe(wire::global_topic(options.network));
  if (options.on_ready) options.on_ready();

  WorkerRun run;
  auto publish = [&](const fedavg::LocalUpdate& u) {
    transport.publish(updates, wire::encode_message(wire::to_message(u)));
  };
  for (const auto& rec : records) {
    auto step = worker.step(rec);
    if (step.prediction) run.predictions.push_back(*step.prediction);
    std::optional<fedavg::LocalUpdate> pending = std::move(step.update);
    while (pending) {
      publish(*pending);
      auto got = await_global(worker, *global_sub, options);
      if (options.on_round) options.on_round(got.outcome);
      run.rounds.push_back(got.outcome);
      pending = std::move(got.next_update);
    }
  }
  return run;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint32_t round) {
  return dir / fmt::format("global_r{:03d}.fedw", round);
}

void run_controller(Controller& controller, wire::Transport& transport,
                    const ControllerDriverOptions& options) {
  const auto& network = controller.config().network;
  auto sub = transport.subscribe(wire::updates_topic(network));
  const auto global = wire::global_topic(network);
  if (options.checkpoint_dir) std::filesystem::create_directories(*options.checkpoint_dir);
  if (options.on_ready) options.on_ready();

  using Clock = std::chrono::steady_clock;
  std::optional<Clock::time_point> deadline;
  std::uint32_t served = 0;
  while (options.rounds == 0 || served < options.rounds) {
    std::optional<wire::Millis> wait;
    if (deadline) {
      wait = std::max(wire::Millis{0},
                      std::chrono::duration_cast<wire::Millis>(*deadline - Clock::now()));
    }
    wire::Bytes bytes;
    try {
      bytes = sub->receive(wait);
    } catch (const TimeoutError&) {
      throw controller.timeout_error();
    }
    const auto msg = wire::decode_message(bytes);
    if (msg.kind != wire::MessageKind::LocalUpdate) continue;
    auto update = wire::to_local_update(msg);
    spdlog::info("controller: round {} update from {} (n={}, improved={})", update.round,
                 update.node_id, update.sample_count, update.improved);
    std::optional<wire::GlobalModel> model;
    try {
      model = controller.on_update(std::move(update));
    } catch (const ProtocolError& e) {
      spdlog::warn("controller: rejected update: {}", e.what());
      continue;
    }
    if (!model) {
      if (!deadline && options.round_timeout) deadline = Clock::now() + *options.round_timeout;
      continue;
    }
    deadline.reset();
    if (options.checkpoint_dir) {
      wire::save_weights(checkpoint_path(*options.checkpoint_dir, model->round), model->weights);
    }
    transport.publish(global, wire::encode_message(
                                  wire::to_message(*model, controller.config().sender_id)));
    spdlog::info("controller: broadcast global model for round {}", model->round);
    if (options.on_broadcast) options.on_broadcast(*model);
    ++served;
  }
}

std::vector<TracePoint> match_trace(std::span<const Prediction> predictions,
                                    std::span<const data::HourlyRecord> records) {
  std::map<data::Timestamp, const data::HourlyRecord*> by_time;
  for (const auto& r : records) by_time[r.timestamp] = &r;
  std::vector<TracePoint> out;
  for (const auto& p : predictions) {
    auto it = by_time.find(p.target);
    if (it == by_time.end()) continue;
    out.push_back({p.target, p.energy_kwh, p.solar_kwh, it->second->energy_kwh,
                   it->second->solar_kwh});
  }
  return out;
}

}  // namespace fedenergy::node
