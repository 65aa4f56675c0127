#pragma once

// Dense multilayer perceptron: ReLU hidden layers, linear output, MSE loss,
// Adam mini-batch training with optional last-layer-only updates.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace fedenergy::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct MlpConfig {
  std::vector<std::size_t> layer_sizes{1450, 256, 128, 64, 2};

  // Throws ConfigError unless there are >= 2 sizes, all >= 1.
  void validate() const;
  std::size_t layer_count() const { return layer_sizes.size() - 1; }
};

struct DenseLayer {
  Matrix weights;  // out x in
  Vector bias;     // out

  std::size_t in() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out() const { return static_cast<std::size_t>(weights.rows()); }
};

struct ModelWeights {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.front().in(); }
  std::size_t output_dim() const { return layers.back().out(); }
  std::size_t param_count() const;
  MlpConfig config() const;

  // Throws ShapeError when layers don't chain or a value is NaN/Inf.
  void validate() const;

  // Exact (bitwise) equality, so +0/-0 and NaN payloads are distinguished.
  bool bit_equal(const ModelWeights& other) const;
};

// Same layout as the weights; one entry per parameter.
using Gradients = ModelWeights;

enum class Phase { Initial, Retrain, FineTune };
enum class Trainable { AllLayers, LastLayerOnly };

struct TrainingSchedule {
  Phase phase = Phase::Initial;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  Trainable trainable = Trainable::AllLayers;

  static TrainingSchedule initial();
  static TrainingSchedule retrain();
  static TrainingSchedule fine_tune();
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct Dataset {
  Matrix inputs;   // N x in
  Matrix targets;  // N x 2 (energy kWh, solar kWh)

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
  void validate() const;
};

struct TrainResult {
  ModelWeights weights;
  // Mean per-sample loss observed while training each epoch.
  std::vector<double> epoch_loss;
};

struct MaeReport {
  double energy = 0.0;
  double solar = 0.0;
  double combined = 0.0;
};

std::size_t param_count(const MlpConfig& config);

// He-uniform weights in [-sqrt(6/fan_in), sqrt(6/fan_in)], zero biases.
ModelWeights init_weights(const MlpConfig& config, std::uint64_t seed);

Vector forward(const ModelWeights& weights, std::span<const double> input);
Matrix forward_batch(const ModelWeights& weights, const Matrix& inputs);

// Mean over rows and outputs of the squared error.
double mse_loss(const ModelWeights& weights, const Matrix& inputs, const Matrix& targets);

// Analytic gradient of mse_loss by backpropagation.
Gradients gradient(const ModelWeights& weights, const Matrix& inputs, const Matrix& targets);

TrainResult train(const ModelWeights& weights, const Dataset& data,
                  const TrainingSchedule& schedule, std::uint64_t seed,
                  const AdamParams& adam = {});

MaeReport evaluate_mae(const ModelWeights& weights, const Dataset& data);

}  // namespace fedenergy::nn
