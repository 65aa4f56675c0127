#include <gtest/gtest.h>

#include <random>

#include "fedenergy/errors.hpp"
#include "fedenergy/fedavg.hpp"
#include "test_util.hpp"

using namespace fedenergy;
using fedavg::LocalUpdate;

namespace {

LocalUpdate scalar_update(const std::string& id, std::uint32_t n, double value,
                          std::uint32_t round = 1) {
  LocalUpdate u;
  u.node_id = id;
  u.round = round;
  u.sample_count = n;
  u.weights.layers.push_back({nn::Matrix{{value}}, nn::Vector{{value}}});
  return u;
}

}  // namespace

TEST(Aggregate, SingleUpdateIsIdentity) {
  std::mt19937_64 rng(1);
  auto ups = testutil::random_updates(rng, 1, {{3, 4, 2}});
  const auto res = fedavg::aggregate(ups);
  EXPECT_TRUE(res.global_weights.bit_equal(ups[0].weights));
  EXPECT_EQ(res.contributor_count, 1u);
  EXPECT_EQ(res.total_samples, ups[0].sample_count);
}

TEST(Aggregate, EqualCountsGiveMean) {
  std::vector<LocalUpdate> ups{scalar_update("a", 336, 1.0), scalar_update("b", 336, 3.0)};
  const auto res = fedavg::aggregate(ups);
  EXPECT_EQ(res.global_weights.layers[0].weights(0, 0), 2.0);
  EXPECT_EQ(res.total_samples, 672u);
}

TEST(Aggregate, WeightedByCounts) {
  std::vector<LocalUpdate> ups{scalar_update("a", 1, 6.0), scalar_update("b", 2, 3.0),
                               scalar_update("c", 3, 2.0)};
  const auto res = fedavg::aggregate(ups);
  EXPECT_DOUBLE_EQ(res.global_weights.layers[0].weights(0, 0), (1 * 6.0 + 2 * 3.0 + 3 * 2.0) / 6);
  EXPECT_DOUBLE_EQ(res.global_weights.layers[0].bias(0), 3.0);
}

TEST(Aggregate, MatchesBruteForceBitExactly) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> k(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto cfg = testutil::random_small_config(rng, 60);
    const auto ups = testutil::random_updates(rng, k(rng), cfg);
    const auto got = fedavg::aggregate(ups).global_weights;
    EXPECT_TRUE(got.bit_equal(testutil::brute_force_fedavg(ups))) << "trial " << trial;
  }
}

TEST(Aggregate, ConvexPermutationInvariantAndScaleFree) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    auto ups = testutil::random_updates(rng, 5, {{4, 3, 2}});
    const auto base = fedavg::aggregate(ups).global_weights;
    for (std::size_t l = 0; l < base.layers.size(); ++l) {
      for (Eigen::Index j = 0; j < base.layers[l].weights.size(); ++j) {
        double lo = 1e300, hi = -1e300;
        for (const auto& u : ups) {
          lo = std::min(lo, u.weights.layers[l].weights.data()[j]);
          hi = std::max(hi, u.weights.layers[l].weights.data()[j]);
        }
        EXPECT_GE(base.layers[l].weights.data()[j], lo);
        EXPECT_LE(base.layers[l].weights.data()[j], hi);
      }
    }
    std::shuffle(ups.begin(), ups.end(), rng);
    EXPECT_TRUE(fedavg::aggregate(ups).global_weights.bit_equal(base));

    // Uniform scaling by a power of two keeps every share exact.
    auto scaled = ups;
    for (auto& u : scaled) u.sample_count *= 4;
    EXPECT_TRUE(fedavg::aggregate(scaled).global_weights.bit_equal(base));
  }
}

TEST(Aggregate, ScaleFreeUnderArbitraryFactor) {
  std::mt19937_64 rng(8);
  auto ups = testutil::random_updates(rng, 4, {{3, 2}});
  for (auto& u : ups) u.sample_count = 1 + u.sample_count % 100;
  const auto base = fedavg::aggregate(ups).global_weights;
  for (auto& u : ups) u.sample_count *= 7;
  const auto scaled = fedavg::aggregate(ups).global_weights;
  for (std::size_t l = 0; l < base.layers.size(); ++l) {
    const double tol = 1e-12 * (1.0 + base.layers[l].weights.cwiseAbs().maxCoeff());
    EXPECT_LE((base.layers[l].weights - scaled.layers[l].weights).cwiseAbs().maxCoeff(), tol);
  }
}

TEST(Aggregate, ConsensusIsIdempotent) {
  std::mt19937_64 rng(3);
  const auto w = testutil::random_model({{5, 4, 2}}, rng);
  std::vector<LocalUpdate> ups;
  for (int i = 0; i < 3; ++i) {
    LocalUpdate u;
    u.node_id = "n" + std::to_string(i);
    u.round = 1;
    u.weights = w;
    u.sample_count = 1;
    ups.push_back(u);
  }
  EXPECT_TRUE(fedavg::aggregate(ups).global_weights.bit_equal(w));
}

TEST(Aggregate, Errors) {
  EXPECT_THROW(fedavg::aggregate({}), ProtocolError);
  {
    std::vector<LocalUpdate> ups{scalar_update("a", 1, 1.0, 1), scalar_update("b", 1, 1.0, 2)};
    EXPECT_THROW(fedavg::aggregate(ups), ProtocolError);
  }
  {
    std::vector<LocalUpdate> ups{scalar_update("a", 1, 1.0), scalar_update("a", 1, 2.0)};
    EXPECT_THROW(fedavg::aggregate(ups), ProtocolError);
  }
  {
    std::vector<LocalUpdate> ups{scalar_update("a", 1, 1.0), scalar_update("b", 0, 2.0)};
    EXPECT_THROW(fedavg::aggregate(ups), AggregationError);
  }
  {
    auto odd = scalar_update("zed", 1, 1.0);
    odd.weights.layers[0].weights = nn::Matrix::Zero(1, 2);
    std::vector<LocalUpdate> ups{scalar_update("a", 1, 1.0), odd};
    try {
      fedavg::aggregate(ups);
      FAIL();
    } catch (const AggregationError& e) {
      EXPECT_NE(std::string(e.what()).find("zed"), std::string::npos);
    }
  }
}
