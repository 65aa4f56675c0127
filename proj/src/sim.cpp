#include "fedenergy/sim.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <future>
#include <set>
#include <thread>

#include <fmt/format.h>
#include <fmt/os.h>
#include <spdlog/spdlog.h>

#include "fedenergy/errors.hpp"
#include "fedenergy/seed.hpp"
#include "fedenergy/tcp.hpp"
#include "fedenergy/transport.hpp"

namespace fedenergy::sim {

namespace {

constexpr std::uint64_t kInitSalt = 1;
constexpr std::uint64_t kTrainSalt = 2;
constexpr std::uint64_t kDataSalt = 3;

RoundReport to_report(const node::RoundOutcome& o, const std::string& node, std::size_t horizon) {
  return {o.round, node, horizon, o.before, o.after, o.improved, o.wall_seconds};
}

void sort_reports(std::vector<RoundReport>& reports) {
  std::sort(reports.begin(), reports.end(), [](const RoundReport& a, const RoundReport& b) {
    return std::tie(a.round, a.node_id) < std::tie(b.round, b.node_id);
  });
}

std::vector<std::string> sorted_ids(std::span<const data::TestHouseSplit> tests) {
  std::vector<std::string> ids;
  for (const auto& t : tests) ids.push_back(t.house_id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct Replay {
  std::string id;
  std::vector<data::HourlyRecord> records;
};

std::vector<Replay> replays_in_id_order(const ExperimentConfig& config,
                                        std::span<const data::TestHouseSplit> tests) {
  std::vector<Replay> out;
  for (const auto& t : tests) out.push_back({t.house_id, replay_records(config, t)});
  std::sort(out.begin(), out.end(), [](const Replay& a, const Replay& b) { return a.id < b.id; });
  return out;
}

SimulationResult run_loopback(const ExperimentConfig& config, const BaseModel& base,
                              std::span<const data::TestHouseSplit> tests,
                              const std::optional<std::filesystem::path>& checkpoint_dir) {
  const auto replays = replays_in_id_order(config, tests);
  const auto wcfg = worker_config(config);

  wire::LoopbackBroker broker;
  auto controller_link = broker.connect();
  node::Controller controller({config.network, "controller", sorted_ids(tests)});
  auto updates_sub = controller_link->subscribe(wire::updates_topic(config.network));
  const auto global = wire::global_topic(config.network);
  if (checkpoint_dir) std::filesystem::create_directories(*checkpoint_dir);

  struct Node {
    node::Worker worker;
    std::unique_ptr<wire::Transport> link;
    std::unique_ptr<wire::Subscription> global_sub;
    std::vector<node::Prediction> predictions;
  };
  std::vector<Node> nodes;
  for (const auto& r : replays) {
    auto link = broker.connect();
    auto sub = link->subscribe(global);
    nodes.push_back({node::Worker(r.id, base.weights, base.scaler, wcfg), std::move(link),
                     std::move(sub), {}});
  }

  SimulationResult result;
  const auto updates = wire::updates_topic(config.network);
  auto publish_update = [&](Node& n, const fedavg::LocalUpdate& u) {
    n.link->publish(updates, wire::encode_message(wire::to_message(u)));
  };

  std::size_t longest = 0;
  for (const auto& r : replays) longest = std::max(longest, r.records.size());

  for (std::size_t hour = 0; hour < longest; ++hour) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (hour >= replays[k].records.size()) continue;
      auto step = nodes[k].worker.step(replays[k].records[hour]);
      if (step.prediction) nodes[k].predictions.push_back(*step.prediction);
      if (step.update) publish_update(nodes[k], *step.update);
    }
    // Drain until quiescent: controller first, then workers in id order.
    bool progressed = true;
    while (progressed) {
      progressed = false;
      while (auto bytes = updates_sub->poll()) {
        progressed = true;
        auto msg = wire::decode_message(*bytes);
        if (msg.kind != wire::MessageKind::LocalUpdate) continue;
        auto model = controller.on_update(wire::to_local_update(msg));
        if (!model) continue;
        if (checkpoint_dir) {
          wire::save_weights(node::checkpoint_path(*checkpoint_dir, model->round), model->weights);
        }
        controller_link->publish(global, wire::encode_message(wire::to_message(*model, "controller")));
        result.globals.push_back(std::move(*model));
      }
      for (auto& n : nodes) {
        while (auto bytes = n.global_sub->poll()) {
          progressed = true;
          auto msg = wire::decode_message(*bytes);
          if (msg.kind != wire::MessageKind::GlobalModel) continue;
          if (n.worker.phase() != node::WorkerPhase::AwaitingGlobal) continue;
          auto model = wire::to_global_model(msg);
          if (model.round != n.worker.round()) continue;
          auto got = n.worker.receive_global(model);
          result.reports.push_back(to_report(got.outcome, n.worker.node_id(), config.horizon_hours));
          if (got.next_update) publish_update(n, *got.next_update);
        }
      }
    }
  }

  for (std::size_t k = 0; k < nodes.size(); ++k) {
    if (nodes[k].worker.phase() == node::WorkerPhase::AwaitingGlobal) {
      throw RoundAbortedError(controller.timeout_error());
    }
    result.traces[replays[k].id] = node::match_trace(nodes[k].predictions, replays[k].records);
  }
  sort_reports(result.reports);
  return result;
}

SimulationResult run_tcp(const ExperimentConfig& config, const BaseModel& base,
                         std::span<const data::TestHouseSplit> tests,
                         const std::optional<std::filesystem::path>& checkpoint_dir) {
  const auto replays = replays_in_id_order(config, tests);
  const auto wcfg = worker_config(config);
  const wire::Millis timeout{std::chrono::minutes{10}};

  wire::TcpBroker broker(wire::Address{"127.0.0.1", 0});
  broker.start();
  const wire::Address addr{"127.0.0.1", broker.port()};

  SimulationResult result;
  std::mutex result_mu;

  node::Controller controller({config.network, "controller", sorted_ids(tests)});
  std::promise<void> controller_ready;
  auto controller_done = std::async(std::launch::async, [&] {
    auto link = wire::connect_tcp(addr, {"controller"});
    node::ControllerDriverOptions opts;
    opts.rounds = static_cast<std::uint32_t>(config.rounds);
    opts.round_timeout = timeout;
    opts.checkpoint_dir = checkpoint_dir;
    opts.on_broadcast = [&](const wire::GlobalModel& m) {
      std::lock_guard lock(result_mu);
      result.globals.push_back(m);
    };
    opts.on_ready = [&] { controller_ready.set_value(); };
    node::run_controller(controller, *link, opts);
  });
  // Surface a connect failure instead of waiting forever.
  auto ready = controller_ready.get_future();
  while (ready.wait_for(std::chrono::milliseconds(50)) != std::future_status::ready) {
    if (controller_done.wait_for(std::chrono::seconds(0)) == std::future_status::ready) {
      controller_done.get();
      throw Error("controller exited before subscribing");
    }
  }

  std::vector<std::future<void>> workers;
  for (const auto& r : replays) {
    workers.push_back(std::async(std::launch::async, [&, id = r.id, recs = &r.records] {
      auto link = wire::connect_tcp(addr, {id});
      node::Worker worker(id, base.weights, base.scaler, wcfg);
      node::WorkerDriverOptions opts;
      opts.network = config.network;
      opts.global_timeout = timeout;
      auto run = node::run_worker(worker, *link, *recs, opts);
      auto trace = node::match_trace(run.predictions, *recs);
      std::lock_guard lock(result_mu);
      for (const auto& o : run.rounds) {
        result.reports.push_back(to_report(o, id, config.horizon_hours));
      }
      result.traces[id] = std::move(trace);
    }));
  }

  std::exception_ptr failure;
  for (auto& w : workers) {
    try {
      w.get();
    } catch (...) {
      if (!failure) failure = std::current_exception();
    }
  }
  try {
    controller_done.get();
  } catch (...) {
    if (!failure) failure = std::current_exception();
  }
  broker.stop();
  if (failure) std::rethrow_exception(failure);

  sort_reports(result.reports);
  std::sort(result.globals.begin(), result.globals.end(),
            [](const auto& a, const auto& b) { return a.round < b.round; });
  return result;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (horizon_hours != 1 && horizon_hours != 6) {
    throw ConfigError(fmt::format("horizon must be 1 or 6 hours, got {}", horizon_hours));
  }
  if (rounds == 0) throw ConfigError("rounds must be positive");
  if (base_stride == 0) throw ConfigError("base stride must be positive");
  if (test_house_ids.empty()) throw ConfigError("need at least one test house");
  std::set<std::string> unique(test_house_ids.begin(), test_house_ids.end());
  if (unique.size() != test_house_ids.size()) throw ConfigError("test house ids repeat");
  if (!load_csv && houses < test_house_ids.size() + 1) {
    throw ConfigError(fmt::format("{} houses leave no base-training house beside {} test houses",
                                  houses, test_house_ids.size()));
  }
  if (load_csv.has_value() != weather_csv.has_value()) {
    throw ConfigError("load and weather CSV paths must be given together");
  }
  model.validate();
  if (model.layer_sizes.front() != window().feature_dim() || model.layer_sizes.back() != 2) {
    throw ConfigError(fmt::format("model must map {} features to 2 outputs", window().feature_dim()));
  }
  for (const auto* s : {&initial, &retrain, &fine_tune}) {
    if (s->epochs == 0 || s->batch_size == 0 || !(s->learning_rate > 0.0)) {
      throw ConfigError("training schedules need positive epochs, batch size and learning rate");
    }
  }
  wire::updates_topic(network);
}

std::vector<std::vector<data::HourlyRecord>> load_households(const ExperimentConfig& config) {
  if (!config.load_csv) {
    return data::generate_synthetic(config.houses, config.hours, mix_seed(config.seed, kDataSalt))
        .houses;
  }
  const auto rows = data::read_load_csv(*config.load_csv);
  const auto weather = data::read_weather_csv(*config.weather_csv);
  std::ofstream gaps(config.output_dir / "gaps.txt");
  auto by_house = data::ingest_households(rows, weather, &gaps);
  std::vector<std::vector<data::HourlyRecord>> out;
  for (auto& [id, recs] : by_house) {
    data::require_contiguous(recs);
    out.push_back(std::move(recs));
  }
  return out;
}

data::PecanSplit make_split(const ExperimentConfig& config,
                            const std::vector<std::vector<data::HourlyRecord>>& houses) {
  auto split = data::split_pecan_style(houses, config.test_house_ids, config.window(),
                                       config.base_stride);
  const std::size_t need = config.rounds * node::kRoundHours;
  for (const auto& t : split.tests) {
    if (t.stream.size() < need) {
      throw ConfigError(fmt::format("house '{}' streams {} hours but {} rounds need {}", t.house_id,
                                    t.stream.size(), config.rounds, need));
    }
    const std::size_t preload = config.window().history_hours - 1 + config.horizon_hours;
    if (t.warmup.size() < preload) {
      throw ConfigError(fmt::format("house '{}' has {} warm-up hours, the window needs {}",
                                    t.house_id, t.warmup.size(), preload));
    }
  }
  return split;
}

BaseModel train_base(const ExperimentConfig& config, nn::Dataset base_train) {
  BaseModel base;
  base.scaler = data::fit_scaler(base_train);
  base.scaler.transform_inplace(base_train.inputs);
  const auto init = nn::init_weights(config.model, mix_seed(config.seed, kInitSalt));
  spdlog::info("training base model on {} examples ({} parameters)", base_train.size(),
               init.param_count());
  auto trained = nn::train(init, base_train, config.initial, mix_seed(config.seed, kTrainSalt));
  base.weights = std::move(trained.weights);
  base.epoch_loss = std::move(trained.epoch_loss);
  for (std::size_t e = 0; e < base.epoch_loss.size(); ++e) {
    spdlog::info("base epoch {}: loss {:.6f}", e + 1, base.epoch_loss[e]);
  }
  return base;
}

void save_base(const BaseModel& base, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  wire::save_weights(dir / "model.fedw", base.weights);
  base.scaler.save(dir / "scaler.feds");
  auto log = fmt::output_file((dir / "train_log.csv").string());
  log.print("epoch,loss\n");
  for (std::size_t e = 0; e < base.epoch_loss.size(); ++e) {
    log.print("{},{}\n", e + 1, base.epoch_loss[e]);
  }
}

BaseModel load_base(const std::filesystem::path& dir) {
  BaseModel base;
  base.weights = wire::load_weights(dir / "model.fedw");
  base.scaler = data::Scaler::load(dir / "scaler.feds");
  return base;
}

std::vector<data::HourlyRecord> replay_records(const ExperimentConfig& config,
                                               const data::TestHouseSplit& house) {
  const std::size_t preload = config.window().history_hours - 1 + config.horizon_hours;
  if (house.warmup.size() < preload) {
    throw ConfigError(fmt::format("house '{}' lacks {} warm-up hours", house.house_id, preload));
  }
  // One hour short of another full round, so exactly `rounds` rounds run.
  const std::size_t stream =
      std::min(house.stream.size(), (config.rounds + 1) * node::kRoundHours - 1);
  std::vector<data::HourlyRecord> out(house.warmup.end() - static_cast<std::ptrdiff_t>(preload),
                                      house.warmup.end());
  out.insert(out.end(), house.stream.begin(),
             house.stream.begin() + static_cast<std::ptrdiff_t>(stream));
  return out;
}

node::WorkerConfig worker_config(const ExperimentConfig& config) {
  node::WorkerConfig w;
  w.window = config.window();
  w.retrain = config.retrain;
  w.fine_tune = config.fine_tune;
  w.seed = config.seed;
  return w;
}

SimulationResult run_simulation(const ExperimentConfig& config, const BaseModel& base,
                                std::span<const data::TestHouseSplit> tests, TransportKind transport,
                                const std::optional<std::filesystem::path>& checkpoint_dir) {
  config.validate();
  if (tests.empty()) throw ConfigError("no test houses to replay");
  for (const auto& t : tests) {
    if (t.stream.size() < config.rounds * node::kRoundHours) {
      throw ConfigError(fmt::format("house '{}' streams {} hours, {} rounds need {}", t.house_id,
                                    t.stream.size(), config.rounds,
                                    config.rounds * node::kRoundHours));
    }
  }
  auto result = transport == TransportKind::Loopback
                    ? run_loopback(config, base, tests, checkpoint_dir)
                    : run_tcp(config, base, tests, checkpoint_dir);
  if (result.reports.size() != config.rounds * tests.size()) {
    throw Error(fmt::format("expected {} round reports, got {}", config.rounds * tests.size(),
                            result.reports.size()));
  }
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config, TransportKind transport) {
  config.validate();
  std::filesystem::create_directories(config.output_dir);
  ExperimentResult out;
  std::vector<data::TestHouseSplit> tests;
  {
    auto split = make_split(config, load_households(config));
    tests = std::move(split.tests);
    out.base = train_base(config, std::move(split.base_train));
  }
  save_base(out.base, config.output_dir / "base");
  out.sim = run_simulation(config, out.base, tests, transport, config.output_dir / "checkpoints");
  write_rounds_csv(config.output_dir / "rounds.csv", out.sim.reports);
  write_summary_json(config.output_dir / "summary.json", out.sim.reports);
  emit_plot_data(config.output_dir, out.sim.reports, out.sim.traces);
  return out;
}

}  // namespace fedenergy::sim
