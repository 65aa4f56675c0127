#include "fedenergy/node.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "fedenergy/errors.hpp"
#include "fedenergy/seed.hpp"

namespace fedenergy::node {

namespace {

constexpr std::uint64_t kRetrainSalt = 0;
constexpr std::uint64_t kFineTuneSalt = 1;

std::uint64_t phase_seed(std::uint64_t base, const std::string& node, std::uint32_t round,
                         std::uint64_t salt) {
  return mix_seed(mix_seed(base, hash_name(node)), std::uint64_t{round} * 2 + salt);
}

}  // namespace

Worker::Worker(std::string node_id, nn::ModelWeights weights, data::Scaler scaler,
               WorkerConfig config)
    : node_id_(std::move(node_id)),
      weights_(std::move(weights)),
      scaler_(std::move(scaler)),
      config_(std::move(config)) {
  weights_.validate();
  if (config_.round_hours == 0) throw ConfigError("round length must be positive");
  if (weights_.input_dim() != config_.window.feature_dim()) {
    throw ConfigError(fmt::format("model takes {} inputs but the window produces {}",
                                  weights_.input_dim(), config_.window.feature_dim()));
  }
  if (scaler_.dim() != config_.window.feature_dim()) {
    throw ConfigError(fmt::format("scaler covers {} features, window produces {}", scaler_.dim(),
                                  config_.window.feature_dim()));
  }
  if (weights_.output_dim() != 2) throw ConfigError("model must output (energy, solar)");
}

void Worker::check_next(const data::HourlyRecord& record) const {
  record.validate();
  const data::HourlyRecord* last = !deferred_.empty() ? &deferred_.back()
                                   : !series_.empty()  ? &series_.back()
                                                       : nullptr;
  if (last && record.timestamp != last->timestamp + std::chrono::hours{1}) {
    throw ContiguityError(fmt::format("{}: expected record for {}, got {}", node_id_,
                                      data::format_timestamp(last->timestamp + std::chrono::hours{1}),
                                      data::format_timestamp(record.timestamp)));
  }
}

StepResult Worker::step(const data::HourlyRecord& record) {
  check_next(record);
  StepResult result;
  if (phase_ == WorkerPhase::AwaitingGlobal) {
    spdlog::warn("{}: record {} arrived while awaiting the round {} global model; deferred",
                 node_id_, data::format_timestamp(record.timestamp), round_);
    deferred_.push_back(record);
    result.deferred = true;
    return result;
  }
  series_.push_back(record);
  if (buffer_start_ + 1 == series_.size() && buffer_start_ < warmup_hours()) {
    ++buffer_start_;
    result.warming_up = true;
    return result;
  }
  result.prediction = predict();
  if (buffer_size() == config_.round_hours) result.update = run_round();
  return result;
}

Prediction Worker::predict() const {
  const auto& spec = config_.window;
  const auto window = std::span<const data::HourlyRecord>(series_).last(spec.history_hours);
  std::vector<double> features(spec.feature_dim());
  data::write_features(window, spec, features);
  scaler_.transform_inplace(features);
  const nn::Vector out = nn::forward(weights_, features);
  const auto anchor = window.back().timestamp;
  return {anchor, anchor + std::chrono::hours{spec.horizon_hours}, out(0), out(1)};
}

nn::Dataset Worker::round_dataset() const {
  if (context_size() < warmup_hours() || buffer_size() == 0) {
    throw ShapeError(fmt::format("{}: no complete round to build a dataset from", node_id_));
  }
  const auto series =
      std::span<const data::HourlyRecord>(series_).subspan(buffer_start_ - warmup_hours());
  nn::Dataset ds = data::build_examples(series, config_.window);
  scaler_.transform_inplace(ds.inputs);
  return ds;
}

fedavg::LocalUpdate Worker::run_round() {
  if (phase_ != WorkerPhase::Inferring || buffer_size() != config_.round_hours) {
    throw ProtocolError(fmt::format("{}: round {} is not ready ({} of {} hours buffered)", node_id_,
                                    round_, buffer_size(), config_.round_hours));
  }
  round_started_ = std::chrono::steady_clock::now();
  round_data_ = round_dataset();
  RoundOutcome outcome;
  outcome.round = round_;
  outcome.samples = round_data_.size();
  outcome.before = nn::evaluate_mae(weights_, round_data_);

  fedavg::LocalUpdate update;
  update.node_id = node_id_;
  update.round = round_;
  update.sample_count = static_cast<std::uint32_t>(round_data_.size());
  update.mae_before = outcome.before.combined;
  try {
    auto retrained = nn::train(weights_, round_data_, config_.retrain,
                               phase_seed(config_.seed, node_id_, round_, kRetrainSalt));
    outcome.retrained = nn::evaluate_mae(retrained.weights, round_data_);
    outcome.improved = outcome.retrained.combined < outcome.before.combined;
    update.weights = outcome.improved ? std::move(retrained.weights) : weights_;
  } catch (const TrainingDivergedError& e) {
    spdlog::error("{}: retraining diverged in round {}: {}", node_id_, round_, e.what());
    outcome.diverged = true;
    outcome.retrained = outcome.before;
    update.weights = weights_;
  }
  update.mae_after = outcome.retrained.combined;
  update.improved = outcome.improved;
  update.diverged = outcome.diverged;
  pending_outcome_ = outcome;
  phase_ = WorkerPhase::AwaitingGlobal;
  return update;
}

ReceiveResult Worker::receive_global(const wire::GlobalModel& msg) {
  if (phase_ != WorkerPhase::AwaitingGlobal) {
    throw ProtocolError(fmt::format("{}: global model for round {} arrived with no round in flight",
                                    node_id_, msg.round));
  }
  if (msg.round != round_) {
    throw StaleModelError(fmt::format("{}: global model is for round {}, awaiting round {}",
                                      node_id_, msg.round, round_));
  }
  if (msg.weights.config().layer_sizes != weights_.config().layer_sizes) {
    throw ProtocolError(fmt::format("{}: global model shape differs from the local model", node_id_));
  }

  ReceiveResult result;
  result.outcome = pending_outcome_;
  try {
    weights_ = nn::train(msg.weights, round_data_, config_.fine_tune,
                         phase_seed(config_.seed, node_id_, round_, kFineTuneSalt))
                   .weights;
  } catch (const TrainingDivergedError& e) {
    spdlog::error("{}: fine-tuning diverged in round {}: {}; keeping the global model", node_id_,
                  round_, e.what());
    weights_ = msg.weights;
  }
  result.outcome.after = nn::evaluate_mae(weights_, round_data_);
  result.outcome.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - round_started_).count();

  ++round_;
  phase_ = WorkerPhase::Inferring;
  round_data_ = {};
  const std::size_t keep = warmup_hours();
  if (series_.size() > keep) {
    series_.erase(series_.begin(), series_.end() - static_cast<std::ptrdiff_t>(keep));
  }
  buffer_start_ = series_.size();

  // Deferred hours count toward the new round without being forecast.
  std::size_t used = 0;
  while (used < deferred_.size() && buffer_size() < config_.round_hours) {
    series_.push_back(deferred_[used++]);
  }
  deferred_.erase(deferred_.begin(), deferred_.begin() + static_cast<std::ptrdiff_t>(used));
  if (buffer_size() == config_.round_hours) result.next_update = run_round();
  return result;
}

Controller::Controller(ControllerConfig config) : config_(std::move(config)) {
  if (config_.expected_nodes.empty()) throw ConfigError("controller needs at least one node");
  for (const auto& n : config_.expected_nodes) {
    if (!expected_.insert(n).second) throw ConfigError(fmt::format("node '{}' listed twice", n));
  }
  wire::updates_topic(config_.network);
}

std::optional<wire::GlobalModel> Controller::on_update(fedavg::LocalUpdate update) {
  if (!expected_.contains(update.node_id)) {
    throw ProtocolError(fmt::format("update from unknown node '{}'", update.node_id));
  }
  if (update.round != round_) {
    throw ProtocolError(fmt::format("update from '{}' is for round {}, controller is in round {}",
                                    update.node_id, update.round, round_));
  }
  if (pending_.contains(update.node_id)) {
    spdlog::warn("controller: node '{}' resubmitted round {}; replacing", update.node_id, round_);
  }
  pending_[update.node_id] = std::move(update);
  if (pending_.size() < expected_.size()) return std::nullopt;

  std::vector<fedavg::LocalUpdate> updates;
  updates.reserve(pending_.size());
  for (auto& [id, u] : pending_) updates.push_back(std::move(u));
  pending_.clear();
  auto agg = fedavg::aggregate(updates);
  wire::GlobalModel global{round_, std::move(agg.global_weights), agg.total_samples};
  ++round_;
  return global;
}

std::vector<std::string> Controller::absentees() const {
  std::vector<std::string> out;
  for (const auto& n : expected_) {
    if (!pending_.contains(n)) out.push_back(n);
  }
  return out;
}

RoundAbortedError Controller::timeout_error() const { return {round_, absentees()}; }

}  // namespace fedenergy::node
