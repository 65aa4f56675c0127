#include "fedenergy/nn.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "fedenergy/errors.hpp"

namespace fedenergy::nn {
namespace {

void relu_inplace(Matrix& m) { m = m.cwiseMax(0.0); }

// Coefficient-wise product: every output is one dot product accumulated in a
// fixed order, so a row's result does not depend on how many rows share the
// batch (blocked GEMM kernels change with the batch size).
Matrix affine(const DenseLayer& layer, const Matrix& inputs) {
  Matrix z = inputs.lazyProduct(layer.weights.transpose());
  z.rowwise() += layer.bias.transpose();
  return z;
}

void check_input(const ModelWeights& weights, Eigen::Index cols) {
  if (weights.layers.empty()) throw ShapeError("model has no layers");
  if (static_cast<std::size_t>(cols) != weights.input_dim()) {
    throw ShapeError(fmt::format("input has {} features, model expects {}", cols,
                                 weights.input_dim()));
  }
}

void check_targets(const ModelWeights& weights, const Matrix& inputs, const Matrix& targets) {
  check_input(weights, inputs.cols());
  if (inputs.rows() != targets.rows()) {
    throw ShapeError(fmt::format("{} input rows vs {} target rows", inputs.rows(), targets.rows()));
  }
  if (static_cast<std::size_t>(targets.cols()) != weights.output_dim()) {
    throw ShapeError(fmt::format("targets have {} columns, model outputs {}", targets.cols(),
                                 weights.output_dim()));
  }
}

// Forward pass that keeps every layer's output (post-activation) for backprop.
std::vector<Matrix> forward_trace(const ModelWeights& weights, const Matrix& inputs) {
  std::vector<Matrix> acts;
  acts.reserve(weights.layers.size() + 1);
  acts.push_back(inputs);
  for (std::size_t i = 0; i < weights.layers.size(); ++i) {
    Matrix z = affine(weights.layers[i], acts.back());
    if (i + 1 < weights.layers.size()) relu_inplace(z);
    acts.push_back(std::move(z));
  }
  return acts;
}

// Gradient of the mean squared error given a recorded trace. Layers below
// `first_layer` are left zero-sized in the result.
Gradients backprop(const ModelWeights& weights, const std::vector<Matrix>& acts,
                   const Matrix& targets, std::size_t first_layer) {
  const std::size_t n_layers = weights.layers.size();
  const double scale = 2.0 / static_cast<double>(targets.rows() * targets.cols());

  Gradients grads;
  grads.layers.resize(n_layers);
  Matrix delta = (acts.back() - targets) * scale;
  for (std::size_t i = n_layers; i-- > first_layer;) {
    grads.layers[i].weights = delta.transpose() * acts[i];
    grads.layers[i].bias = delta.colwise().sum().transpose();
    if (i == first_layer) break;
    Matrix upstream = delta * weights.layers[i].weights;
    // acts[i] is post-ReLU, so acts[i] > 0 exactly where the pre-activation was.
    delta = upstream.cwiseProduct((acts[i].array() > 0.0).cast<double>().matrix());
  }
  return grads;
}

struct AdamSlot {
  Matrix m_w, v_w;
  Vector m_b, v_b;
};

Matrix gather_rows(const Matrix& src, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), src.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = src.row(static_cast<Eigen::Index>(rows[r]));
  }
  return out;
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace

void MlpConfig::validate() const {
  if (layer_sizes.size() < 2) throw ConfigError("MLP needs at least an input and an output size");
  for (auto s : layer_sizes) {
    if (s == 0) throw ConfigError("MLP layer sizes must be positive");
  }
}

std::size_t ModelWeights::param_count() const {
  std::size_t total = 0;
  for (const auto& l : layers) total += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return total;
}

MlpConfig ModelWeights::config() const {
  MlpConfig cfg;
  cfg.layer_sizes.clear();
  if (layers.empty()) return cfg;
  cfg.layer_sizes.push_back(layers.front().in());
  for (const auto& l : layers) cfg.layer_sizes.push_back(l.out());
  return cfg;
}

void ModelWeights::validate() const {
  if (layers.empty()) throw ShapeError("model has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.weights.rows() == 0 || l.weights.cols() == 0) {
      throw ShapeError(fmt::format("layer {} has an empty weight matrix", i));
    }
    if (l.bias.size() != l.weights.rows()) {
      throw ShapeError(fmt::format("layer {} bias has {} entries, expected {}", i, l.bias.size(),
                                   l.weights.rows()));
    }
    if (i > 0 && layers[i - 1].out() != l.in()) {
      throw ShapeError(fmt::format("layer {} expects {} inputs but layer {} emits {}", i, l.in(),
                                   i - 1, layers[i - 1].out()));
    }
    if (!all_finite(l.weights) || !all_finite(l.bias)) {
      throw ShapeError(fmt::format("layer {} contains non-finite values", i));
    }
  }
}

bool ModelWeights::bit_equal(const ModelWeights& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& a = layers[i];
    const auto& b = other.layers[i];
    if (a.weights.rows() != b.weights.rows() || a.weights.cols() != b.weights.cols() ||
        a.bias.size() != b.bias.size()) {
      return false;
    }
    if (std::memcmp(a.weights.data(), b.weights.data(), sizeof(double) * a.weights.size()) != 0 ||
        std::memcmp(a.bias.data(), b.bias.data(), sizeof(double) * a.bias.size()) != 0) {
      return false;
    }
  }
  return true;
}

TrainingSchedule TrainingSchedule::initial() {
  return {Phase::Initial, 5, 32, 1e-3, Trainable::AllLayers};
}

TrainingSchedule TrainingSchedule::retrain() {
  return {Phase::Retrain, 2, 32, 1e-5, Trainable::AllLayers};
}

TrainingSchedule TrainingSchedule::fine_tune() {
  return {Phase::FineTune, 2, 32, 1e-2, Trainable::LastLayerOnly};
}

void Dataset::validate() const {
  if (inputs.rows() == 0) throw ShapeError("dataset is empty");
  if (inputs.rows() != targets.rows()) {
    throw ShapeError(fmt::format("{} input rows vs {} target rows", inputs.rows(), targets.rows()));
  }
  if (!all_finite(inputs) || !all_finite(targets)) throw ShapeError("dataset has non-finite values");
}

std::size_t param_count(const MlpConfig& config) {
  config.validate();
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < config.layer_sizes.size(); ++i) {
    total += config.layer_sizes[i] * config.layer_sizes[i + 1] + config.layer_sizes[i + 1];
  }
  return total;
}

ModelWeights init_weights(const MlpConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  ModelWeights w;
  for (std::size_t i = 0; i + 1 < config.layer_sizes.size(); ++i) {
    const auto in = static_cast<Eigen::Index>(config.layer_sizes[i]);
    const auto out = static_cast<Eigen::Index>(config.layer_sizes[i + 1]);
    const double bound = std::sqrt(6.0 / static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer{Matrix(out, in), Vector::Zero(out)};
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weights(r, c) = dist(rng);
    }
    w.layers.push_back(std::move(layer));
  }
  return w;
}

Vector forward(const ModelWeights& weights, std::span<const double> input) {
  Matrix row(1, static_cast<Eigen::Index>(input.size()));
  for (std::size_t i = 0; i < input.size(); ++i) row(0, static_cast<Eigen::Index>(i)) = input[i];
  return forward_batch(weights, row).row(0).transpose();
}

Matrix forward_batch(const ModelWeights& weights, const Matrix& inputs) {
  check_input(weights, inputs.cols());
  Matrix a = inputs;
  for (std::size_t i = 0; i < weights.layers.size(); ++i) {
    a = affine(weights.layers[i], a);
    if (i + 1 < weights.layers.size()) relu_inplace(a);
  }
  return a;
}

double mse_loss(const ModelWeights& weights, const Matrix& inputs, const Matrix& targets) {
  check_targets(weights, inputs, targets);
  const Matrix err = forward_batch(weights, inputs) - targets;
  return err.squaredNorm() / static_cast<double>(err.size());
}

Gradients gradient(const ModelWeights& weights, const Matrix& inputs, const Matrix& targets) {
  check_targets(weights, inputs, targets);
  if (inputs.rows() == 0) throw ShapeError("gradient of an empty batch");
  return backprop(weights, forward_trace(weights, inputs), targets, 0);
}

TrainResult train(const ModelWeights& weights, const Dataset& data,
                  const TrainingSchedule& schedule, std::uint64_t seed, const AdamParams& adam) {
  weights.validate();
  data.validate();
  check_targets(weights, data.inputs, data.targets);
  if (schedule.batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(schedule.learning_rate >= 0.0)) throw ConfigError("learning rate must be nonnegative");

  TrainResult result{weights, {}};
  auto& layers = result.weights.layers;
  const std::size_t first = schedule.trainable == Trainable::LastLayerOnly ? layers.size() - 1 : 0;

  std::vector<AdamSlot> slots(layers.size());
  for (std::size_t i = first; i < layers.size(); ++i) {
    slots[i].m_w = Matrix::Zero(layers[i].weights.rows(), layers[i].weights.cols());
    slots[i].v_w = slots[i].m_w;
    slots[i].m_b = Vector::Zero(layers[i].bias.size());
    slots[i].v_b = slots[i].m_b;
  }

  const std::size_t n = data.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::uint64_t step = 0;
  const double lr = schedule.learning_rate;

  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    // Fisher-Yates.
    for (std::size_t i = n - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i);
      std::swap(order[i], order[pick(rng)]);
    }
    double epoch_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < n; start += schedule.batch_size, ++batch_index) {
      const std::size_t end = std::min(n, start + schedule.batch_size);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Matrix x = gather_rows(data.inputs, rows);
      const Matrix t = gather_rows(data.targets, rows);

      const auto acts = forward_trace(result.weights, x);
      const double loss =
          (acts.back() - t).squaredNorm() / static_cast<double>(t.rows() * t.cols());
      if (!std::isfinite(loss)) throw TrainingDivergedError(epoch, batch_index);
      epoch_sum += loss * static_cast<double>(rows.size());

      const Gradients g = backprop(result.weights, acts, t, first);
      ++step;
      const double bc1 = 1.0 - std::pow(adam.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(adam.beta2, static_cast<double>(step));
      for (std::size_t i = first; i < layers.size(); ++i) {
        auto& s = slots[i];
        s.m_w = adam.beta1 * s.m_w + (1.0 - adam.beta1) * g.layers[i].weights;
        s.v_w = adam.beta2 * s.v_w + (1.0 - adam.beta2) * g.layers[i].weights.cwiseAbs2();
        s.m_b = adam.beta1 * s.m_b + (1.0 - adam.beta1) * g.layers[i].bias;
        s.v_b = adam.beta2 * s.v_b + (1.0 - adam.beta2) * g.layers[i].bias.cwiseAbs2();
        layers[i].weights.array() -=
            lr * (s.m_w.array() / bc1) / ((s.v_w.array() / bc2).sqrt() + adam.epsilon);
        layers[i].bias.array() -=
            lr * (s.m_b.array() / bc1) / ((s.v_b.array() / bc2).sqrt() + adam.epsilon);
      }
    }
    result.epoch_loss.push_back(epoch_sum / static_cast<double>(n));
  }
  return result;
}

MaeReport evaluate_mae(const ModelWeights& weights, const Dataset& data) {
  data.validate();
  check_targets(weights, data.inputs, data.targets);
  if (data.targets.cols() != 2) throw ShapeError("MAE report expects (energy, solar) targets");
  const Matrix err = (forward_batch(weights, data.inputs) - data.targets).cwiseAbs();
  MaeReport r;
  const auto rows = static_cast<double>(err.rows());
  r.energy = err.col(0).sum() / rows;
  r.solar = err.col(1).sum() / rows;
  r.combined = 0.5 * (r.energy + r.solar);
  return r;
}

}  // namespace fedenergy::nn
