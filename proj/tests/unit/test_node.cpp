#include <gtest/gtest.h>

#include <future>

#include "fedenergy/data.hpp"
#include "fedenergy/errors.hpp"
#include "fedenergy/node.hpp"
#include "fedenergy/node_driver.hpp"
#include "fedenergy/tcp.hpp"
#include "test_util.hpp"

using namespace fedenergy;
using namespace fedenergy::node;
using namespace std::chrono_literals;

namespace {

constexpr std::size_t kHistory = 24;
constexpr std::size_t kRound = 48;

struct Fixture {
  std::vector<std::vector<data::HourlyRecord>> houses;
  data::Scaler scaler;
  nn::ModelWeights weights;
  WorkerConfig config;
};

Fixture small_fixture(std::size_t hours = 400, std::size_t horizon = 1) {
  Fixture f;
  f.houses = data::generate_synthetic(4, hours, 11).houses;
  f.config.window = {kHistory, horizon};
  f.config.round_hours = kRound;
  f.config.seed = 5;
  f.scaler = data::fit_scaler(data::build_examples(f.houses[0], f.config.window));
  f.weights = nn::init_weights({{f.config.window.feature_dim(), 8, 2}}, 3);
  return f;
}

Worker make_worker(const Fixture& f, std::size_t house, WorkerConfig cfg) {
  return Worker(data::synthetic_house_id(house), f.weights, f.scaler, std::move(cfg));
}

// Steps until the worker publishes; returns the update and the index of the next record.
std::pair<fedavg::LocalUpdate, std::size_t> step_to_update(Worker& w,
                                                           const std::vector<data::HourlyRecord>& recs,
                                                           std::size_t from = 0) {
  for (std::size_t i = from; i < recs.size(); ++i) {
    auto s = w.step(recs[i]);
    if (s.update) return {*s.update, i + 1};
  }
  throw std::runtime_error("no update produced");
}

wire::GlobalModel global_from(const std::vector<fedavg::LocalUpdate>& ups) {
  auto agg = fedavg::aggregate(ups);
  return {ups.front().round, agg.global_weights, agg.total_samples};
}

}  // namespace

TEST(Worker, WarmsUpThenForecasts) {
  const auto f = small_fixture();
  auto w = make_worker(f, 0, f.config);
  EXPECT_EQ(w.warmup_hours(), kHistory);  // history - 1 + horizon
  for (std::size_t i = 0; i < w.warmup_hours(); ++i) {
    const auto s = w.step(f.houses[0][i]);
    EXPECT_TRUE(s.warming_up);
    EXPECT_FALSE(s.prediction);
  }
  const auto s = w.step(f.houses[0][w.warmup_hours()]);
  ASSERT_TRUE(s.prediction);
  EXPECT_EQ(s.prediction->anchor, f.houses[0][w.warmup_hours()].timestamp);
  EXPECT_EQ(s.prediction->target, s.prediction->anchor + 1h);
  EXPECT_EQ(w.buffer_size(), 1u);
}

TEST(Worker, SixHourHorizonWarmup) {
  const auto f = small_fixture(400, 6);
  auto w = make_worker(f, 0, f.config);
  EXPECT_EQ(w.warmup_hours(), kHistory - 1 + 6);
  std::size_t first = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    if (w.step(f.houses[0][i]).prediction) {
      first = i;
      break;
    }
  }
  EXPECT_EQ(first, w.warmup_hours());
}

TEST(Worker, RoundFiresOnceWhenBufferFills) {
  const auto f = small_fixture();
  auto w = make_worker(f, 0, f.config);
  int fired = 0;
  std::size_t i = 0;
  for (; i < w.warmup_hours() + kRound; ++i) {
    const auto s = w.step(f.houses[0][i]);
    if (s.update) {
      ++fired;
      EXPECT_EQ(i, w.warmup_hours() + kRound - 1);
      EXPECT_EQ(s.update->sample_count, kRound);
      EXPECT_EQ(s.update->round, 1u);
    }
  }
  EXPECT_EQ(fired, 1);
  EXPECT_EQ(w.phase(), WorkerPhase::AwaitingGlobal);
}

TEST(Worker, RecordsDuringAwaitAreDeferredWithoutForecast) {
  const auto f = small_fixture();
  auto w = make_worker(f, 0, f.config);
  auto [u, next] = step_to_update(w, f.houses[0]);
  const auto s = w.step(f.houses[0][next]);
  EXPECT_TRUE(s.deferred);
  EXPECT_FALSE(s.prediction);
  EXPECT_EQ(w.deferred_size(), 1u);
  // The deferred hour joins the next round's buffer once the global arrives.
  w.receive_global(global_from({u}));
  EXPECT_EQ(w.buffer_size(), 1u);
  EXPECT_EQ(w.deferred_size(), 0u);
  EXPECT_EQ(w.phase(), WorkerPhase::Inferring);
}

TEST(Worker, IdenticalStateGivesIdenticalForecast) {
  const auto f = small_fixture();
  auto a = make_worker(f, 0, f.config);
  auto b = make_worker(f, 0, f.config);
  for (std::size_t i = 0; i < 40; ++i) {
    const auto x = a.step(f.houses[0][i]);
    const auto y = b.step(f.houses[0][i]);
    ASSERT_EQ(x.prediction.has_value(), y.prediction.has_value());
    if (x.prediction) {
      EXPECT_EQ(std::memcmp(&x.prediction->energy_kwh, &y.prediction->energy_kwh, 8), 0);
      EXPECT_EQ(std::memcmp(&x.prediction->solar_kwh, &y.prediction->solar_kwh, 8), 0);
    }
  }
}

TEST(Worker, NonContiguousRecordRejected) {
  const auto f = small_fixture();
  auto w = make_worker(f, 0, f.config);
  w.step(f.houses[0][0]);
  EXPECT_THROW(w.step(f.houses[0][2]), ContiguityError);
}

TEST(Worker, ImprovingRetrainSendsRetrainedWeights) {
  auto f = small_fixture();
  auto cfg = f.config;
  cfg.retrain.learning_rate = 1e-3;
  cfg.retrain.epochs = 10;
  auto w = make_worker(f, 0, cfg);
  const auto prior = w.weights();
  auto [u, next] = step_to_update(w, f.houses[0]);
  ASSERT_TRUE(u.improved);
  EXPECT_LT(u.mae_after, u.mae_before);
  EXPECT_FALSE(u.weights.bit_equal(prior));
}

TEST(Worker, NonImprovingRetrainSendsPriorWeights) {
  auto f = small_fixture();
  auto cfg = f.config;
  cfg.retrain.learning_rate = 0.0;
  auto w = make_worker(f, 0, cfg);
  const auto prior = w.weights();
  auto [u, next] = step_to_update(w, f.houses[0]);
  EXPECT_FALSE(u.improved);
  EXPECT_TRUE(u.weights.bit_equal(prior));
  EXPECT_EQ(w.phase(), WorkerPhase::AwaitingGlobal);
}

TEST(Worker, DivergedRetrainSendsPriorWeightsFlagged) {
  auto f = small_fixture();
  auto cfg = f.config;
  cfg.retrain.learning_rate = 1e250;
  auto w = make_worker(f, 0, cfg);
  const auto prior = w.weights();
  auto [u, next] = step_to_update(w, f.houses[0]);
  EXPECT_TRUE(u.diverged);
  EXPECT_FALSE(u.improved);
  EXPECT_TRUE(u.weights.bit_equal(prior));
}

TEST(Worker, GlobalReceiptFineTunesLastLayerOnly) {
  const auto f = small_fixture();
  std::vector<Worker> workers;
  std::vector<fedavg::LocalUpdate> ups;
  for (std::size_t h = 0; h < 2; ++h) {
    workers.push_back(make_worker(f, h, f.config));
    ups.push_back(step_to_update(workers.back(), f.houses[h]).first);
  }
  const auto global = global_from(ups);
  for (auto& w : workers) {
    const auto res = w.receive_global(global);
    EXPECT_EQ(res.outcome.round, 1u);
    EXPECT_EQ(w.round(), 2u);
    EXPECT_EQ(w.buffer_size(), 0u);
    EXPECT_EQ(w.phase(), WorkerPhase::Inferring);
    for (std::size_t l = 0; l + 1 < global.weights.layers.size(); ++l) {
      nn::ModelWeights a, b;
      a.layers = {w.weights().layers[l]};
      b.layers = {global.weights.layers[l]};
      EXPECT_TRUE(a.bit_equal(b)) << "layer " << l;
    }
  }
  // Each node customizes the shared model's last layer differently.
  EXPECT_FALSE(workers[0].weights().layers.back().weights ==
               workers[1].weights().layers.back().weights);
}

TEST(Worker, StaleGlobalRejectedStateUnchanged) {
  const auto f = small_fixture();
  auto w = make_worker(f, 0, f.config);
  auto [u, next] = step_to_update(w, f.houses[0]);
  auto g = global_from({u});
  g.round = 0;
  EXPECT_THROW(w.receive_global(g), StaleModelError);
  EXPECT_EQ(w.phase(), WorkerPhase::AwaitingGlobal);
  EXPECT_EQ(w.round(), 1u);
  g.round = 1;
  EXPECT_NO_THROW(w.receive_global(g));
  EXPECT_THROW(w.receive_global(g), ProtocolError);
}

TEST(Worker, NextRoundBeforeMaeIsFineTunedModelOnNewData) {
  const auto f = small_fixture();
  auto w = make_worker(f, 0, f.config);
  auto [u1, next] = step_to_update(w, f.houses[0]);
  w.receive_global(global_from({u1}));
  const auto tuned = w.weights();
  auto [u2, after] = step_to_update(w, f.houses[0], next);
  EXPECT_EQ(u2.round, 2u);
  EXPECT_EQ(u2.mae_before, nn::evaluate_mae(tuned, w.round_dataset()).combined);
  // Round 2 targets are the 48 hours after round 1's.
  const auto ds = w.round_dataset();
  EXPECT_EQ(ds.size(), kRound);
  EXPECT_EQ(ds.targets(0, 0), f.houses[0][next].energy_kwh);
}

TEST(Worker, PaperGeometryPublishes336Samples) {
  auto houses = data::generate_synthetic(1, 1200, 4).houses;
  WorkerConfig cfg;
  cfg.window = {720, 1};
  const auto scaler = data::fit_scaler(data::build_examples(houses[0], cfg.window, 10));
  Worker w("house_00", nn::init_weights({{1450, 4, 2}}, 1), scaler, cfg);
  auto [u, next] = step_to_update(w, houses[0]);
  EXPECT_EQ(u.sample_count, 336u);
  EXPECT_EQ(next, 720u + 336u);
}

TEST(Controller, BarrierThenSingleBroadcast) {
  Controller c({"net1", "controller", {"a", "b", "c", "d"}});
  std::mt19937_64 rng(1);
  const nn::MlpConfig cfg{{3, 2}};
  std::vector<fedavg::LocalUpdate> ups;
  for (const char* id : {"d", "b", "a", "c"}) {
    fedavg::LocalUpdate u;
    u.node_id = id;
    u.round = 1;
    u.weights = testutil::random_model(cfg, rng);
    u.sample_count = 336;
    ups.push_back(u);
  }
  for (int i = 0; i < 3; ++i) EXPECT_FALSE(c.on_update(ups[i]));
  EXPECT_EQ(c.pending_count(), 3u);
  EXPECT_EQ(c.absentees(), std::vector<std::string>{"c"});
  const auto g = c.on_update(ups[3]);
  ASSERT_TRUE(g);
  EXPECT_EQ(g->round, 1u);
  EXPECT_EQ(g->total_samples, 4u * 336);
  EXPECT_EQ(c.pending_count(), 0u);
  EXPECT_EQ(c.round(), 2u);
  EXPECT_TRUE(g->weights.bit_equal(testutil::brute_force_fedavg(ups)));
  // Equal counts: the elementwise mean.
  const double mean = (ups[0].weights.layers[0].weights(0, 0) + ups[1].weights.layers[0].weights(0, 0) +
                       ups[2].weights.layers[0].weights(0, 0) + ups[3].weights.layers[0].weights(0, 0)) /
                      4.0;
  EXPECT_NEAR(g->weights.layers[0].weights(0, 0), mean, 1e-12 * (1 + std::abs(mean)));
}

TEST(Controller, RejectsUnknownAndWrongRoundReplacesDuplicates) {
  Controller c({"net1", "controller", {"a", "b"}});
  auto mk = [](const std::string& id, std::uint32_t round, double v) {
    fedavg::LocalUpdate u;
    u.node_id = id;
    u.round = round;
    u.sample_count = 1;
    u.weights.layers.push_back({nn::Matrix{{v}}, nn::Vector{{v}}});
    return u;
  };
  EXPECT_THROW(c.on_update(mk("zz", 1, 0)), ProtocolError);
  EXPECT_THROW(c.on_update(mk("a", 2, 0)), ProtocolError);
  EXPECT_FALSE(c.on_update(mk("a", 1, 100.0)));
  EXPECT_FALSE(c.on_update(mk("a", 1, 2.0)));  // replaces
  const auto g = c.on_update(mk("b", 1, 4.0));
  ASSERT_TRUE(g);
  EXPECT_EQ(g->weights.layers[0].weights(0, 0), 3.0);
}

TEST(Controller, TimeoutListsAbsentees) {
  Controller c({"net1", "controller", {"a", "b", "c"}});
  fedavg::LocalUpdate u;
  u.node_id = "b";
  u.round = 1;
  u.sample_count = 1;
  u.weights.layers.push_back({nn::Matrix{{1.0}}, nn::Vector{{1.0}}});
  c.on_update(u);
  const auto e = c.timeout_error();
  EXPECT_EQ(e.round(), 1u);
  EXPECT_EQ(e.absentees(), (std::vector<std::string>{"a", "c"}));
}

TEST(Drivers, ControllerAbortsWhenANodeNeverReports) {
  const auto f = small_fixture();
  wire::LoopbackBroker broker;
  auto ctl_link = broker.connect();
  Controller c({"net1", "controller", {"house_00", "house_01"}});
  ControllerDriverOptions opts;
  opts.rounds = 1;
  opts.round_timeout = 200ms;
  std::promise<void> ready;
  opts.on_ready = [&] { ready.set_value(); };
  auto done = std::async(std::launch::async, [&] { run_controller(c, *ctl_link, opts); });
  ready.get_future().wait();

  auto w = make_worker(f, 0, f.config);
  auto [u, next] = step_to_update(w, f.houses[0]);
  auto link = broker.connect();
  link->publish(wire::updates_topic("net1"), wire::encode_message(wire::to_message(u)));
  try {
    done.get();
    FAIL() << "expected an aborted round";
  } catch (const RoundAbortedError& e) {
    EXPECT_EQ(e.absentees(), std::vector<std::string>{"house_01"});
  }
}

TEST(Drivers, LoopbackAndTcpRunsAgreeBitForBit) {
  const auto f = small_fixture(24 + 3 * kRound + 10);
  auto run = [&](bool tcp) {
    std::unique_ptr<wire::LoopbackBroker> loop;
    std::unique_ptr<wire::TcpBroker> server;
    std::function<std::unique_ptr<wire::Transport>(const std::string&)> connect;
    if (tcp) {
      server = std::make_unique<wire::TcpBroker>(wire::Address{"127.0.0.1", 0});
      server->start();
      connect = [&](const std::string& id) {
        return wire::connect_tcp({"127.0.0.1", server->port()}, {id});
      };
    } else {
      loop = std::make_unique<wire::LoopbackBroker>();
      connect = [&](const std::string&) { return loop->connect(); };
    }
    std::vector<std::string> ids{"house_00", "house_01", "house_02"};
    Controller c({"net1", "controller", ids});
    std::vector<wire::GlobalModel> globals;
    ControllerDriverOptions copts;
    copts.rounds = 3;
    copts.round_timeout = 60s;
    copts.on_broadcast = [&](const wire::GlobalModel& g) { globals.push_back(g); };
    std::promise<void> ready;
    copts.on_ready = [&] { ready.set_value(); };
    auto ctl_link = connect("controller");
    auto ctl = std::async(std::launch::async, [&] { run_controller(c, *ctl_link, copts); });
    ready.get_future().wait();
    std::vector<std::future<WorkerRun>> runs;
    for (std::size_t h = 0; h < ids.size(); ++h) {
      runs.push_back(std::async(std::launch::async, [&, h] {
        auto link = connect(ids[h]);
        auto w = make_worker(f, h, f.config);
        WorkerDriverOptions wopts;
        wopts.global_timeout = 60s;
        return run_worker(w, *link, f.houses[h], wopts);
      }));
    }
    for (auto& r : runs) EXPECT_EQ(r.get().rounds.size(), 3u);
    ctl.get();
    return globals;
  };
  const auto a = run(false);
  const auto b = run(true);
  ASSERT_EQ(a.size(), 3u);
  ASSERT_EQ(b.size(), 3u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(a[r].round, r + 1);
    EXPECT_TRUE(a[r].weights.bit_equal(b[r].weights)) << "round " << r + 1;
  }
}
