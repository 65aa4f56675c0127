#pragma once

// Binds the worker/controller state machines to a pub/sub transport. Used by
// the networked CLI processes and by the in-process TCP replay.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedenergy/node.hpp"
#include "fedenergy/transport.hpp"

namespace fedenergy::node {

struct TracePoint {
  data::Timestamp target;
  double predicted_energy = 0.0;
  double predicted_solar = 0.0;
  double actual_energy = 0.0;
  double actual_solar = 0.0;

  bool operator==(const TracePoint&) const = default;
};

struct WorkerRun {
  std::vector<RoundOutcome> rounds;
  std::vector<Prediction> predictions;
};

struct WorkerDriverOptions {
  std::string network = "net1";
  // Deadline for each wait on the global model; nullopt waits indefinitely.
  std::optional<wire::Millis> global_timeout;
  std::function<void(const RoundOutcome&)> on_round;
  // Called once the global-topic subscription is live.
  std::function<void()> on_ready;
};

// Replays `records` through the worker. After each LocalUpdate is published
// the call blocks on the global topic until the matching round arrives
// (stale rounds are discarded).
WorkerRun run_worker(Worker& worker, wire::Transport& transport,
                     std::span<const data::HourlyRecord> records,
                     const WorkerDriverOptions& options = {});

struct ControllerDriverOptions {
  // Rounds to serve before returning; 0 serves until the transport closes.
  std::uint32_t rounds = 0;
  // Measured from the first update of a round; nullopt never times out.
  std::optional<wire::Millis> round_timeout;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::function<void(const wire::GlobalModel&)> on_broadcast;
  // Called once the updates subscription is live.
  std::function<void()> on_ready;
};

// Serves rounds until `options.rounds` complete. Throws RoundAbortedError when
// a round deadline passes with nodes missing.
void run_controller(Controller& controller, wire::Transport& transport,
                    const ControllerDriverOptions& options = {});

// FEDW checkpoint path for a round's global model.
std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint32_t round);

// Pairs each forecast with the actual value at its target hour (forecasts
// whose target lies outside `records` are skipped).
std::vector<TracePoint> match_trace(std::span<const Prediction> predictions,
                                    std::span<const data::HourlyRecord> records);

}  // namespace fedenergy::node
