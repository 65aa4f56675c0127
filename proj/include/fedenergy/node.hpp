#pragma once

// Worker and controller state machines for one federated round:
//   worker:     hourly inference -> 336-hour buffer full -> retrain -> publish
//               LocalUpdate -> await GlobalModel -> fine-tune last layer -> repeat
//   controller: barrier on every expected node -> FedAvg -> broadcast
//
// Both are transport-agnostic; node_driver.hpp binds them to a Transport.

#include <chrono>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedenergy/data.hpp"
#include "fedenergy/errors.hpp"
#include "fedenergy/fedavg.hpp"
#include "fedenergy/nn.hpp"
#include "fedenergy/wire.hpp"

namespace fedenergy::node {

inline constexpr std::size_t kRoundHours = 336;  // two weeks of hourly data

struct WorkerConfig {
  data::WindowSpec window;
  std::size_t round_hours = kRoundHours;
  nn::TrainingSchedule retrain = nn::TrainingSchedule::retrain();
  nn::TrainingSchedule fine_tune = nn::TrainingSchedule::fine_tune();
  std::uint64_t seed = 0;
};

enum class WorkerPhase { Inferring, AwaitingGlobal };

struct Prediction {
  data::Timestamp anchor;  // hour whose data produced the forecast
  data::Timestamp target;  // anchor + horizon
  double energy_kwh = 0.0;
  double solar_kwh = 0.0;
};

struct StepResult {
  std::optional<Prediction> prediction;
  bool warming_up = false;  // not enough history yet, no forecast
  bool deferred = false;    // arrived while awaiting the global model
  std::optional<fedavg::LocalUpdate> update;  // publish this to the controller
};

struct RoundOutcome {
  std::uint32_t round = 0;
  std::size_t samples = 0;
  nn::MaeReport before;     // model in use during the round
  nn::MaeReport retrained;  // after local retraining
  nn::MaeReport after;      // after global model + last-layer fine-tune
  bool improved = false;    // retrained beat `before` on combined MAE
  bool diverged = false;
  double wall_seconds = 0.0;  // run_round start to fine-tune end
};

struct ReceiveResult {
  RoundOutcome outcome;
  // Set when records deferred during the wait already fill the next round.
  std::optional<fedavg::LocalUpdate> next_update;
};

class Worker {
 public:
  Worker(std::string node_id, nn::ModelWeights weights, data::Scaler scaler, WorkerConfig config);

  // Feeds one hourly record. The first `warmup_hours()` records only build
  // history; after that each record yields a forecast and joins the round
  // buffer. Filling the buffer runs the round and returns its LocalUpdate.
  StepResult step(const data::HourlyRecord& record);

  // Retrains on the buffered round and moves to AwaitingGlobal.
  fedavg::LocalUpdate run_round();

  // Throws StaleModelError (state untouched) when msg.round != round(), and
  // ProtocolError when no round is in flight.
  ReceiveResult receive_global(const wire::GlobalModel& msg);

  const std::string& node_id() const { return node_id_; }
  std::uint32_t round() const { return round_; }
  WorkerPhase phase() const { return phase_; }
  const nn::ModelWeights& weights() const { return weights_; }
  const data::Scaler& scaler() const { return scaler_; }
  const WorkerConfig& config() const { return config_; }
  std::size_t buffer_size() const { return series_.size() - buffer_start_; }
  std::size_t deferred_size() const { return deferred_.size(); }
  std::size_t warmup_hours() const { return config_.window.history_hours - 1 + config_.window.horizon_hours; }

  // Dataset (scaled inputs) whose targets are the buffered hours.
  nn::Dataset round_dataset() const;

 private:
  Prediction predict() const;
  void check_next(const data::HourlyRecord& record) const;
  std::size_t context_size() const { return buffer_start_; }

  std::string node_id_;
  nn::ModelWeights weights_;
  data::Scaler scaler_;
  WorkerConfig config_;
  std::uint32_t round_ = 1;
  WorkerPhase phase_ = WorkerPhase::Inferring;
  // History followed by the current round's buffer; the buffer starts at
  // buffer_start_. Trimmed after every round to warmup_hours() of history.
  std::vector<data::HourlyRecord> series_;
  std::size_t buffer_start_ = 0;
  std::vector<data::HourlyRecord> deferred_;
  // In-flight round, valid while AwaitingGlobal.
  nn::Dataset round_data_;
  RoundOutcome pending_outcome_;
  std::chrono::steady_clock::time_point round_started_;
};

struct ControllerConfig {
  std::string network = "net1";
  std::string sender_id = "controller";
  std::vector<std::string> expected_nodes;
};

class Controller {
 public:
  explicit Controller(ControllerConfig config);

  // Stores the update; once every expected node has reported, aggregates and
  // returns the GlobalModel to broadcast. A second submission from the same
  // node in one round replaces the first. Throws ProtocolError for unknown
  // nodes and updates from another round.
  std::optional<wire::GlobalModel> on_update(fedavg::LocalUpdate update);

  // The error to raise when the round deadline passes with nodes missing.
  RoundAbortedError timeout_error() const;

  std::uint32_t round() const { return round_; }
  std::size_t pending_count() const { return pending_.size(); }
  std::vector<std::string> absentees() const;
  const ControllerConfig& config() const { return config_; }

 private:
  ControllerConfig config_;
  std::set<std::string> expected_;
  std::map<std::string, fedavg::LocalUpdate> pending_;
  std::uint32_t round_ = 1;
};

}  // namespace fedenergy::node
