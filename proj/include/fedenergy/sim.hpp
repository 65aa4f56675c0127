#pragma once

// End-to-end experiments: base-model training on the Pecan-Street-style split
// and the federated replay of each test house's second half-year.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedenergy/data.hpp"
#include "fedenergy/nn.hpp"
#include "fedenergy/node.hpp"
#include "fedenergy/node_driver.hpp"
#include "fedenergy/wire.hpp"

namespace fedenergy::sim {

enum class TransportKind { Loopback, Tcp };

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::size_t houses = 20;
  std::size_t hours = 8760;
  std::vector<std::string> test_house_ids{"house_00", "house_01", "house_02", "house_03"};
  std::size_t horizon_hours = 1;
  std::size_t rounds = 13;
  // CSV data source; synthetic data is generated when unset.
  std::optional<std::filesystem::path> load_csv;
  std::optional<std::filesystem::path> weather_csv;
  nn::MlpConfig model;
  nn::TrainingSchedule initial = nn::TrainingSchedule::initial();
  nn::TrainingSchedule retrain = nn::TrainingSchedule::retrain();
  nn::TrainingSchedule fine_tune = nn::TrainingSchedule::fine_tune();
  // Keep every n-th base-training anchor hour (memory/time knob).
  std::size_t base_stride = 4;
  std::string network = "net1";
  std::filesystem::path output_dir = "out";

  data::WindowSpec window() const { return {720, horizon_hours}; }
  void validate() const;
};

struct BaseModel {
  nn::ModelWeights weights;
  data::Scaler scaler;
  std::vector<double> epoch_loss;
};

struct RoundReport {
  std::uint32_t round = 0;
  std::string node_id;
  std::size_t horizon = 0;
  nn::MaeReport before;  // prior model on the round's targets
  nn::MaeReport after;   // fine-tuned global model on the same targets
  bool local_improved = false;
  double wall_seconds = 0.0;
};

struct SimulationResult {
  std::vector<RoundReport> reports;  // ordered by (round, node)
  std::map<std::string, std::vector<node::TracePoint>> traces;
  std::vector<wire::GlobalModel> globals;  // one per completed round
};

// Households in id order, synthetic or from CSV per the config.
std::vector<std::vector<data::HourlyRecord>> load_households(const ExperimentConfig& config);

data::PecanSplit make_split(const ExperimentConfig& config,
                            const std::vector<std::vector<data::HourlyRecord>>& houses);

// Fits the scaler and trains the default MLP under the Initial schedule.
// Consumes the base training set (scaled in place).
BaseModel train_base(const ExperimentConfig& config, nn::Dataset base_train);

// model.fedw, scaler.feds and train_log.csv under `dir`.
void save_base(const BaseModel& base, const std::filesystem::path& dir);
BaseModel load_base(const std::filesystem::path& dir);

// Hours each test house replays: the tail of its warm-up half that fills the
// feature window, then its stream, truncated so exactly `rounds` rounds run.
std::vector<data::HourlyRecord> replay_records(const ExperimentConfig& config,
                                               const data::TestHouseSplit& house);

node::WorkerConfig worker_config(const ExperimentConfig& config);

// Replays every test house through worker/controller state machines over the
// chosen transport. Loopback runs single-threaded in (hour, node id) order;
// Tcp runs an in-process broker with one thread per node. Global checkpoints
// go to `checkpoint_dir` when given.
SimulationResult run_simulation(const ExperimentConfig& config, const BaseModel& base,
                                std::span<const data::TestHouseSplit> tests, TransportKind transport,
                                const std::optional<std::filesystem::path>& checkpoint_dir = {});

struct ExperimentResult {
  BaseModel base;
  SimulationResult sim;
};

// One horizon end to end: load data, split, train and save the base model,
// replay the test houses and write every report under config.output_dir:
//   base/{model.fedw,scaler.feds,train_log.csv}  checkpoints/global_rNNN.fedw
//   rounds.csv  summary.json  plot_mae.csv  trace_<node>.csv
ExperimentResult run_experiment(const ExperimentConfig& config,
                                TransportKind transport = TransportKind::Loopback);

// ---- reports ----------------------------------------------------------------

// rounds.csv: round,node,horizon,mae_before,mae_after,mae_energy,mae_solar
void write_rounds_csv(const std::filesystem::path& path, std::span<const RoundReport> reports);
void write_summary_json(const std::filesystem::path& path, std::span<const RoundReport> reports);

// plot_mae.csv (round + before/after per house) and one trace_<node>.csv per
// house. Throws ConfigError when there are no reports.
void emit_plot_data(const std::filesystem::path& dir, std::span<const RoundReport> reports,
                    const std::map<std::string, std::vector<node::TracePoint>>& traces);

// Fraction of (node, round) cells where mae_after <= mae_before.
double fraction_improved(std::span<const RoundReport> reports);

}  // namespace fedenergy::sim
