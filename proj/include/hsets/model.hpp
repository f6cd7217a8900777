#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "hsets/autodiff.hpp"
#include "hsets/dataset.hpp"
#include "hsets/tensor.hpp"

namespace hsets {

struct DenseLayer {
  Index in = 0;
  Index out = 0;
};

struct Conv2dLayer {
  Index in_channels = 0;
  Index out_channels = 0;
  Index kernel = 0;
  int stride = 1;
  int pad = 0;
};

struct SmoothReluLayer {
  double tau = 1e-3;
};

struct FlattenLayer {};

struct AvgPoolLayer {
  int window = 2;
};

using Layer = std::variant<DenseLayer, Conv2dLayer, SmoothReluLayer, FlattenLayer, AvgPoolLayer>;

/// Feed-forward classifier layout. The last layer emits the class logits;
/// softmax is never part of the network and only applied at evaluation.
struct NetworkSpec {
  ImageShape input;
  Index classes = 0;
  std::vector<Layer> layers;

  /// Output shape of every layer, validating that consecutive layers compose.
  std::vector<Shape> layer_shapes() const;
  void validate() const;

  /// 784 -> 128 -> 10 with smooth ReLU.
  static NetworkSpec reference_mlp(ImageShape input = {28, 28, 1}, Index classes = 10, double tau = 1e-3);
  /// conv(1->8, 5) -> pool -> conv(8->16, 5) -> pool -> dense -> classes, smooth ReLU after each conv.
  static NetworkSpec reference_cnn(ImageShape input = {28, 28, 1}, Index classes = 10, double tau = 1e-3);
};

/// Parameters of one layer; both tensors are empty for parameter-free layers.
struct LayerParams {
  Tensor weight;
  Tensor bias;
};

struct Weights {
  std::vector<LayerParams> layers;

  bool all_finite() const;
  friend bool operator==(const Weights& a, const Weights& b);
};

struct Model {
  NetworkSpec spec;
  Weights weights;
};

/// Expected parameter shapes for a layer given its input shape.
std::pair<Shape, Shape> parameter_shapes(const Layer& layer);
bool has_parameters(const Layer& layer);

void validate_weights(const NetworkSpec& spec, const Weights& weights);

/// Tape mapping an (H, W, C) image to logits, with the weights as constants.
Tape build_tape(const NetworkSpec& spec, const Weights& weights);

Tensor predict(const NetworkSpec& spec, const Weights& weights, const Tensor& image);
Index argmax(const Tensor& logits);

/// Holds a tape for repeated evaluation of one network. Not thread-safe;
/// copy it per worker.
class Classifier {
 public:
  explicit Classifier(const Model& model) : tape_(build_tape(model.spec, model.weights)) {}
  Classifier(const NetworkSpec& spec, const Weights& weights) : tape_(build_tape(spec, weights)) {}

  Tensor logits(const Tensor& image) { return forward(tape_, image); }
  Index predict_class(const Tensor& image) { return argmax(logits(image)); }
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
};

double accuracy(Classifier& classifier, const Dataset& data);

/// He-normal weights, zero biases.
Weights init_weights(const NetworkSpec& spec, std::uint64_t seed);

struct TrainConfig {
  double lr = 0.05;
  int epochs = 5;
  int batch = 32;
  std::uint64_t seed = 0;
};

/// Mini-batch SGD on softmax cross-entropy of the logits. Deterministic for a seed.
Weights train_sgd(const NetworkSpec& spec, const Dataset& data, const TrainConfig& config);
Weights train_sgd(const NetworkSpec& spec, const Dataset& data, const TrainConfig& config, Weights initial);

/// Text header followed by a little-endian float32 blob.
void save_model(const NetworkSpec& spec, const Weights& weights, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

std::string model_header(const NetworkSpec& spec);

}  // namespace hsets
