#include "fedenergy/fedavg.hpp"

#include <algorithm>
#include <fmt/format.h>

#include "fedenergy/errors.hpp"

namespace fedenergy::fedavg {

namespace {

bool same_shape(const nn::ModelWeights& a, const nn::ModelWeights& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].weights.rows() != b.layers[i].weights.rows() ||
        a.layers[i].weights.cols() != b.layers[i].weights.cols() ||
        a.layers[i].bias.size() != b.layers[i].bias.size()) {
      return false;
    }
  }
  return true;
}

}  // namespace

AggregateResult aggregate(std::span<const LocalUpdate> updates) {
  if (updates.empty()) throw ProtocolError("aggregate called with no updates");

  std::vector<const LocalUpdate*> ordered;
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->node_id < b->node_id; });

  const LocalUpdate& ref = *ordered.front();
  std::uint64_t total = 0;
  for (std::size_t k = 0; k < ordered.size(); ++k) {
    const auto& u = *ordered[k];
    if (k > 0 && u.node_id == ordered[k - 1]->node_id) {
      throw ProtocolError(fmt::format("node '{}' submitted twice", u.node_id));
    }
    if (u.round != ref.round) {
      throw ProtocolError(fmt::format("mixed rounds: node '{}' is in round {}, node '{}' in {}",
                                      u.node_id, u.round, ref.node_id, ref.round));
    }
    if (u.sample_count == 0) {
      throw AggregationError(fmt::format("node '{}' reports zero samples", u.node_id));
    }
    if (!same_shape(u.weights, ref.weights)) {
      throw AggregationError(fmt::format("node '{}' has layer shapes that differ from node '{}'",
                                         u.node_id, ref.node_id));
    }
    total += u.sample_count;
  }

  AggregateResult result;
  result.total_samples = total;
  result.contributor_count = ordered.size();
  result.global_weights = ref.weights;
  const double n = static_cast<double>(total);
  for (std::size_t l = 0; l < ref.weights.layers.size(); ++l) {
    auto& w = result.global_weights.layers[l].weights;
    auto& b = result.global_weights.layers[l].bias;
    nn::Matrix w_lo = w, w_hi = w;
    nn::Vector b_lo = b, b_hi = b;
    w.setZero();
    b.setZero();
    for (const auto* u : ordered) {
      const auto& layer = u->weights.layers[l];
      const double share = static_cast<double>(u->sample_count) / n;
      w += share * layer.weights;
      b += share * layer.bias;
      w_lo = w_lo.cwiseMin(layer.weights);
      w_hi = w_hi.cwiseMax(layer.weights);
      b_lo = b_lo.cwiseMin(layer.bias);
      b_hi = b_hi.cwiseMax(layer.bias);
    }
    // The exact weighted mean lies in [min_k, max_k]; clamping removes the
    // last-ulp rounding excursions so consensus inputs come back unchanged.
    w = w.cwiseMax(w_lo).cwiseMin(w_hi);
    b = b.cwiseMax(b_lo).cwiseMin(b_hi);
  }
  return result;
}

}  // namespace fedenergy::fedavg
