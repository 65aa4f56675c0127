// fedenergy: data generation, base training, simulation and the networked
// broker/controller/worker processes.

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/os.h>
#include <spdlog/spdlog.h>

#include "fedenergy/data.hpp"
#include "fedenergy/errors.hpp"
#include "fedenergy/fedavg.hpp"
#include "fedenergy/node.hpp"
#include "fedenergy/node_driver.hpp"
#include "fedenergy/seed.hpp"
#include "fedenergy/sim.hpp"
#include "fedenergy/tcp.hpp"
#include "fedenergy/wire.hpp"

namespace fs = std::filesystem;
using namespace fedenergy;

namespace {

struct ExperimentFlags {
  sim::ExperimentConfig cfg;
  std::string load_csv;
  std::string weather_csv;
  std::string output_dir = "out";
  std::size_t initial_epochs = nn::TrainingSchedule::initial().epochs;
  std::size_t retrain_epochs = nn::TrainingSchedule::retrain().epochs;
  std::size_t fine_tune_epochs = nn::TrainingSchedule::fine_tune().epochs;

  void add(CLI::App* app) {
    app->add_option("--seed", cfg.seed, "Experiment seed")->capture_default_str();
    app->add_option("--houses", cfg.houses, "Synthetic house count")->capture_default_str();
    app->add_option("--hours", cfg.hours, "Synthetic hours per house")->capture_default_str();
    app->add_option("--test-houses", cfg.test_house_ids, "Houses replayed by workers")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--rounds", cfg.rounds, "Federated rounds")->capture_default_str();
    app->add_option("--load-csv", load_csv, "Household load CSV (synthetic when omitted)");
    app->add_option("--weather-csv", weather_csv, "Weather CSV");
    app->add_option("--base-stride", cfg.base_stride, "Keep every n-th base anchor hour")
        ->capture_default_str();
    app->add_option("--initial-epochs", initial_epochs)->capture_default_str();
    app->add_option("--retrain-epochs", retrain_epochs)->capture_default_str();
    app->add_option("--finetune-epochs", fine_tune_epochs)->capture_default_str();
    app->add_option("--network", cfg.network)->capture_default_str();
    app->add_option("--output-dir", output_dir)->capture_default_str();
  }

  sim::ExperimentConfig resolve(std::size_t horizon) const {
    auto c = cfg;
    c.horizon_hours = horizon;
    c.model.layer_sizes.front() = c.window().feature_dim();
    if (!load_csv.empty()) c.load_csv = load_csv;
    if (!weather_csv.empty()) c.weather_csv = weather_csv;
    c.initial.epochs = initial_epochs;
    c.retrain.epochs = retrain_epochs;
    c.fine_tune.epochs = fine_tune_epochs;
    c.output_dir = fs::path(output_dir) / fmt::format("h{}", horizon);
    c.validate();
    return c;
  }
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    if (end > start) out.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

int gen_data(std::size_t houses, std::size_t hours, std::uint64_t seed, const fs::path& dir) {
  fs::create_directories(dir);
  auto net = data::generate_synthetic(houses, hours, seed);
  data::write_load_csv(dir / "load.csv", net.houses);
  data::write_weather_csv(dir / "weather.csv", net.weather);
  spdlog::info("wrote {} houses x {} hours to {}", houses, hours, dir.string());
  return 0;
}

int train_base_cmd(const ExperimentFlags& flags, std::size_t horizon) {
  const auto cfg = flags.resolve(horizon);
  fs::create_directories(cfg.output_dir);
  auto split = sim::make_split(cfg, sim::load_households(cfg));
  const auto base = sim::train_base(cfg, std::move(split.base_train));
  sim::save_base(base, cfg.output_dir / "base");
  spdlog::info("base model saved under {}", (cfg.output_dir / "base").string());
  return 0;
}

int simulate_cmd(const ExperimentFlags& flags, const std::vector<std::size_t>& horizons,
                 const std::string& transport) {
  const auto kind = transport == "tcp" ? sim::TransportKind::Tcp : sim::TransportKind::Loopback;
  for (auto h : horizons) {
    const auto cfg = flags.resolve(h);
    auto res = sim::run_experiment(cfg, kind);
    spdlog::info("horizon {}: {} round reports, {:.3f} of cells improved; outputs in {}", h,
                 res.sim.reports.size(), sim::fraction_improved(res.sim.reports),
                 cfg.output_dir.string());
  }
  return 0;
}

int broker_cmd(const std::string& listen) {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  wire::TcpBroker broker(wire::Address::parse(listen));
  broker.start();
  spdlog::info("broker listening on port {}", broker.port());
  std::cout << "listening " << broker.port() << std::endl;
  int sig = 0;
  sigwait(&set, &sig);
  spdlog::info("broker stopping on signal {}", sig);
  broker.stop();
  return 0;
}

int controller_cmd(const std::vector<std::string>& nodes, const std::string& addr,
                   double timeout_secs, const std::string& checkpoint_dir, std::uint32_t rounds,
                   const std::string& network) {
  node::Controller controller({network, "controller", nodes});
  auto link = wire::connect_tcp(wire::Address::parse(addr), {"controller"});
  node::ControllerDriverOptions opts;
  opts.rounds = rounds;
  if (timeout_secs > 0) {
    opts.round_timeout = wire::Millis{static_cast<std::int64_t>(timeout_secs * 1000)};
  }
  if (!checkpoint_dir.empty()) opts.checkpoint_dir = checkpoint_dir;
  node::run_controller(controller, *link, opts);
  return 0;
}

struct WorkerFlags {
  std::string node_id;
  std::string broker_addr = "127.0.0.1:1884";
  std::string model_file;
  std::string scaler_file;
  std::string data_csv;
  std::string weather_csv;
  std::size_t horizon = 1;
  std::string output_dir = "out";
  std::uint64_t seed = 42;
  std::string network = "net1";
  std::size_t start_hour = 0;
  std::size_t rounds = 0;
  double timeout_secs = 0;
};

int worker_cmd(const WorkerFlags& f) {
  auto houses = data::ingest_households(data::read_load_csv(f.data_csv),
                                        data::read_weather_csv(f.weather_csv));
  auto it = houses.find(f.node_id);
  if (it == houses.end()) {
    throw ConfigError(fmt::format("no rows for house '{}' in {}", f.node_id, f.data_csv));
  }
  data::require_contiguous(it->second);
  if (f.start_hour >= it->second.size()) throw ConfigError("--start-hour is past the data");
  std::vector<data::HourlyRecord> records(it->second.begin() + static_cast<std::ptrdiff_t>(f.start_hour),
                                          it->second.end());

  node::WorkerConfig wcfg;
  wcfg.window = {720, f.horizon};
  wcfg.seed = f.seed;
  node::Worker worker(f.node_id, wire::load_weights(f.model_file),
                      data::Scaler::load(f.scaler_file), wcfg);
  if (f.rounds > 0) {
    const std::size_t keep = worker.warmup_hours() + (f.rounds + 1) * node::kRoundHours - 1;
    if (records.size() > keep) records.resize(keep);
  }

  auto link = wire::connect_tcp(wire::Address::parse(f.broker_addr), {f.node_id});
  node::WorkerDriverOptions opts;
  opts.network = f.network;
  if (f.timeout_secs > 0) {
    opts.global_timeout = wire::Millis{static_cast<std::int64_t>(f.timeout_secs * 1000)};
  }
  opts.on_round = [&](const node::RoundOutcome& o) {
    spdlog::info("{}: round {} mae before {:.4f} after {:.4f}", f.node_id, o.round,
                 o.before.combined, o.after.combined);
  };
  const auto run = node::run_worker(worker, *link, records, opts);

  fs::create_directories(f.output_dir);
  std::vector<sim::RoundReport> reports;
  for (const auto& o : run.rounds) {
    reports.push_back({o.round, f.node_id, f.horizon, o.before, o.after, o.improved, o.wall_seconds});
  }
  sim::write_rounds_csv(fs::path(f.output_dir) / fmt::format("rounds_{}.csv", f.node_id), reports);
  if (!reports.empty()) {
    sim::emit_plot_data(f.output_dir, reports, {{f.node_id, node::match_trace(run.predictions, records)}});
  }
  return 0;
}

int aggregate_cmd(const std::vector<std::string>& inputs, const std::vector<std::uint32_t>& samples,
                  const std::string& output) {
  if (inputs.size() != samples.size()) {
    throw ConfigError("--inputs and --samples must have the same length");
  }
  std::vector<fedavg::LocalUpdate> updates;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    fedavg::LocalUpdate u;
    u.node_id = fmt::format("input_{:03d}", i);
    u.round = 1;
    u.weights = wire::load_weights(inputs[i]);
    u.sample_count = samples[i];
    updates.push_back(std::move(u));
  }
  auto res = fedavg::aggregate(updates);
  wire::save_weights(output, res.global_weights);
  spdlog::info("aggregated {} models over {} samples into {}", res.contributor_count,
               res.total_samples, output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated hourly energy and solar forecasting"};
  app.set_config("--config", "", "Flat key = value config file");
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level)->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Write synthetic load.csv and weather.csv");
  std::size_t gen_houses = 20, gen_hours = 8760;
  std::uint64_t gen_seed = 42;
  std::string gen_dir = "data";
  gen->add_option("--houses", gen_houses)->capture_default_str();
  gen->add_option("--hours", gen_hours)->capture_default_str();
  gen->add_option("--seed", gen_seed)->capture_default_str();
  gen->add_option("--output-dir", gen_dir)->capture_default_str();

  auto* train = app.add_subcommand("train-base", "Train and save the base model");
  ExperimentFlags train_flags;
  std::size_t train_horizon = 1;
  train_flags.add(train);
  train->add_option("--horizon", train_horizon)->check(CLI::IsMember({1, 6}))->capture_default_str();

  auto* simulate = app.add_subcommand("simulate", "Train base models and replay the test houses");
  ExperimentFlags sim_flags;
  std::vector<std::size_t> horizons{1, 6};
  std::string transport = "loopback";
  sim_flags.add(simulate);
  simulate->add_option("--horizons", horizons)->delimiter(',')->check(CLI::IsMember({1, 6}))
      ->capture_default_str();
  simulate->add_option("--transport", transport)->check(CLI::IsMember({"loopback", "tcp"}))
      ->capture_default_str();

  auto* broker = app.add_subcommand("broker", "Run the pub/sub broker until SIGINT/SIGTERM");
  std::string listen = "127.0.0.1:1884";
  broker->add_option("--listen", listen)->capture_default_str();

  auto* controller = app.add_subcommand("controller", "Aggregate worker updates each round");
  std::string expected, ctl_addr = "127.0.0.1:1884", ctl_ckpt, ctl_network = "net1";
  double ctl_timeout = 600;
  std::uint32_t ctl_rounds = 0;
  controller->add_option("--expected-nodes", expected, "Comma-separated node ids")->required();
  controller->add_option("--broker-addr", ctl_addr)->capture_default_str();
  controller->add_option("--timeout-secs", ctl_timeout, "Round deadline; 0 waits forever")
      ->capture_default_str();
  controller->add_option("--checkpoint-dir", ctl_ckpt);
  controller->add_option("--rounds", ctl_rounds, "Rounds to serve; 0 serves until killed")
      ->capture_default_str();
  controller->add_option("--network", ctl_network)->capture_default_str();

  auto* worker = app.add_subcommand("worker", "Replay one house against a broker");
  WorkerFlags wf;
  worker->add_option("--node-id", wf.node_id)->required();
  worker->add_option("--broker-addr", wf.broker_addr)->capture_default_str();
  worker->add_option("--model-file", wf.model_file)->required();
  worker->add_option("--scaler-file", wf.scaler_file)->required();
  worker->add_option("--data-csv", wf.data_csv)->required();
  worker->add_option("--weather-csv", wf.weather_csv)->required();
  worker->add_option("--horizon", wf.horizon)->check(CLI::IsMember({1, 6}))->capture_default_str();
  worker->add_option("--output-dir", wf.output_dir)->capture_default_str();
  worker->add_option("--seed", wf.seed)->capture_default_str();
  worker->add_option("--network", wf.network)->capture_default_str();
  worker->add_option("--start-hour", wf.start_hour, "First row of the house series to replay")
      ->capture_default_str();
  worker->add_option("--rounds", wf.rounds, "Stop after this many rounds; 0 replays everything")
      ->capture_default_str();
  worker->add_option("--timeout-secs", wf.timeout_secs, "Wait limit for each global model")
      ->capture_default_str();

  auto* agg = app.add_subcommand("aggregate", "FedAvg a set of FEDW files");
  std::vector<std::string> agg_inputs;
  std::vector<std::uint32_t> agg_samples;
  std::string agg_output;
  agg->add_option("--inputs", agg_inputs)->delimiter(',')->required();
  agg->add_option("--samples", agg_samples)->delimiter(',')->required();
  agg->add_option("--output", agg_output)->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*gen) return gen_data(gen_houses, gen_hours, gen_seed, gen_dir);
    if (*train) return train_base_cmd(train_flags, train_horizon);
    if (*simulate) return simulate_cmd(sim_flags, horizons, transport);
    if (*broker) return broker_cmd(listen);
    if (*controller) {
      return controller_cmd(split_list(expected), ctl_addr, ctl_timeout, ctl_ckpt, ctl_rounds,
                            ctl_network);
    }
    if (*worker) return worker_cmd(wf);
    if (*agg) return aggregate_cmd(agg_inputs, agg_samples, agg_output);
  } catch (const RoundAbortedError& e) {
    spdlog::error("{}", e.what());
    return 3;
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
