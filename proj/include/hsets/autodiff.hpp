#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "hsets/tensor.hpp"

namespace hsets {

struct SmoothingConfig {
  double tau = 1e-3;

  static SmoothingConfig checked(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("smoothing tau must be positive and finite");
    return {tau};
  }
};

// Smoothed ReLU h(z) = (z + sqrt(z^2 + tau)) / 2 and its first two derivatives.
// For z < 0 the sum is rewritten as tau / (sqrt(z^2 + tau) - z) to avoid cancellation.
template <typename Scalar>
Scalar smooth_relu(Scalar z, SmoothingConfig config) {
  const Scalar tau = static_cast<Scalar>(config.tau);
  const Scalar s = std::sqrt(z * z + tau);
  return z >= Scalar(0) ? (z + s) / Scalar(2) : tau / (Scalar(2) * (s - z));
}

template <typename Scalar>
Scalar smooth_relu_derivative(Scalar z, SmoothingConfig config) {
  const Scalar s = std::sqrt(z * z + static_cast<Scalar>(config.tau));
  return (Scalar(1) + z / s) / Scalar(2);
}

template <typename Scalar>
Scalar smooth_relu_second_derivative(Scalar z, SmoothingConfig config) {
  const Scalar tau = static_cast<Scalar>(config.tau);
  const Scalar q = z * z + tau;
  return tau / (Scalar(2) * q * std::sqrt(q));
}

enum class OpKind {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  MatVec,
  Conv2d,
  ChannelBias,
  AvgPool,
  Reshape,
  SmoothRelu,
  Relu,
  Sum,
  Select,
  Softmax,
  LogSumExp,
};

const char* op_name(OpKind kind);

struct NodeId {
  int index = -1;
  friend bool operator==(NodeId, NodeId) = default;
};

/// A recorded computation graph over dense tensors.
///
/// Nodes are appended in topological order, so every parent index is smaller
/// than its child's. The tape is a single-evaluation object: the value,
/// adjoint and tangent caches belong to the most recent call. Copy the tape
/// to evaluate concurrently.
///
/// Second-order quantities are computed forward-over-reverse: a tangent
/// sweep pushes a direction through the graph, and the reverse sweep carries
/// both the adjoint and its directional derivative.
class Tape {
 public:
  struct Node {
    OpKind kind = OpKind::Constant;
    int lhs = -1;
    int rhs = -1;
    Shape shape;
    Tensor constant;   // Constant payload
    int slot = -1;     // Input position
    double scale = 0;  // Scale factor or smoothing tau
    Index index = 0;   // Select index
    int stride = 1;
    int pad = 0;
    int window = 1;
    bool active = false;  // depends on some input
  };

  NodeId input(Shape shape);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// (out x in) matrix times length-in vector.
  NodeId matvec(NodeId matrix, NodeId vec);
  /// Kernel (Cout, Cin, k, k) over a channel-last (H, W, Cin) image.
  NodeId conv2d(NodeId kernel, NodeId image, int stride, int pad);
  NodeId channel_bias(NodeId image, NodeId bias);
  NodeId avg_pool(NodeId image, int window);
  NodeId reshape(NodeId a, Shape shape);
  NodeId smooth_relu(NodeId a, SmoothingConfig config);
  /// Hard ReLU. First-order only; second-order sweeps reject it.
  NodeId relu(NodeId a);
  NodeId sum(NodeId a);
  NodeId select(NodeId a, Index i);
  NodeId softmax(NodeId a);
  NodeId log_sum_exp(NodeId a);

  void set_output(NodeId out);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id.index)); }
  std::size_t input_count() const { return input_nodes_.size(); }
  const Shape& input_shape(std::size_t slot = 0) const;
  const Shape& output_shape() const;
  NodeId output() const { return {output_}; }

  /// Evaluates every node. Inputs are checked against the recorded shapes.
  Tensor forward(std::span<const Tensor> inputs);
  Tensor forward(const Tensor& input) { return forward(std::span<const Tensor>(&input, 1)); }

  /// Cached value of a node from the most recent forward().
  Tensor value(NodeId id) const;

  /// Vector-Jacobian product: gradients of <seed, output> with respect to every input.
  /// Requires a preceding forward() on the same inputs.
  std::vector<Tensor> backward(const Tensor& seed);

  /// Same sweep as backward() without copying the results out; read them
  /// with input_adjoint(). Valid until the next sweep.
  void reverse(const Tensor& seed);
  const Eigen::VectorXd& input_adjoint(std::size_t slot) const;

  /// Forward-over-reverse sweep. `tangents` holds one direction per input
  /// (empty tensors mean zero). Returns, per input, the derivative of the
  /// gradient of <seed, output> along the tangent direction.
  std::vector<Tensor> second_order(std::span<const Tensor> inputs, std::span<const Tensor> tangents,
                                   const Tensor& seed);

 private:
  NodeId push(Node node);
  void require_output() const;
  void check(NodeId id) const;
  const Eigen::VectorXd& val(std::size_t i) const {
    return nodes_[i].kind == OpKind::Constant ? nodes_[i].constant.data() : values_[i];
  }

  std::vector<Node> nodes_;
  std::vector<int> input_nodes_;
  int output_ = -1;

  std::vector<Eigen::VectorXd> values_;
  std::vector<Eigen::VectorXd> adjoints_;
  std::vector<Eigen::VectorXd> tangents_;
  std::vector<Eigen::VectorXd> tangent_adjoints_;
  bool evaluated_ = false;
  bool reversed_ = false;
};

/// Logits f(x) for a single-input tape.
Tensor forward(Tape& tape, const Tensor& inputs);

/// Gradient of output component `output_index` with respect to the single input.
Tensor gradient(Tape& tape, const Tensor& inputs, Index output_index);

/// Hessian of output component `output_index` contracted with `v`.
Tensor hvp(Tape& tape, const Tensor& inputs, Index output_index, const Tensor& v);

/// Row `i` of the Hessian of output component `output_index`.
Tensor hessian_row(Tape& tape, const Tensor& inputs, Index output_index, Index i);

}  // namespace hsets
