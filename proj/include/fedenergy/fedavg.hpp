#pragma once

// Federated averaging: global = sum_k (n_k / n) * local_k, parameter by parameter.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedenergy/nn.hpp"

namespace fedenergy::fedavg {

struct LocalUpdate {
  std::string node_id;
  std::uint32_t round = 0;
  nn::ModelWeights weights;
  std::uint32_t sample_count = 0;
  double mae_before = 0.0;
  double mae_after = 0.0;
  bool improved = false;
  bool diverged = false;  // retraining blew up; weights are the prior model
};

struct AggregateResult {
  nn::ModelWeights global_weights;
  std::uint64_t total_samples = 0;
  std::size_t contributor_count = 0;
};

// Updates are summed in ascending node_id order regardless of input order, so
// the result is bit-reproducible. Throws ProtocolError for an empty list,
// mixed rounds or duplicate node ids, AggregationError for shape mismatches
// (naming the node) and zero sample counts.
AggregateResult aggregate(std::span<const LocalUpdate> updates);

}  // namespace fedenergy::fedavg
