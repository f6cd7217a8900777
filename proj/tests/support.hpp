#pragma once

// Test-only helpers: random smooth-ReLU MLPs, a straight-line evaluator that
// does not touch the tape, and finite-difference oracles.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "hsets/autodiff.hpp"

namespace hsets::testing {

struct DenseLayer {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

struct Mlp {
  std::vector<DenseLayer> layers;
  SmoothingConfig smoothing;
};

inline Mlp random_mlp(const std::vector<Index>& widths, std::uint64_t seed, double tau = 1e-3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Mlp mlp;
  mlp.smoothing = SmoothingConfig{tau};
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    DenseLayer layer;
    const double scale = 1.0 / std::sqrt(static_cast<double>(widths[l]));
    layer.weight = Eigen::MatrixXd::NullaryExpr(widths[l + 1], widths[l], [&] { return scale * normal(rng); });
    layer.bias = Eigen::VectorXd::NullaryExpr(widths[l + 1], [&] { return 0.1 * normal(rng); });
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

inline Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  Eigen::VectorXd flat(m.size());
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) flat(r * m.cols() + c) = m(r, c);
  return Tensor(Shape{m.rows(), m.cols()}, flat);
}

/// Tape of the MLP logits with smooth ReLU between layers.
inline Tape mlp_tape(const Mlp& mlp) {
  Tape tape;
  NodeId h = tape.input(Shape{mlp.layers.front().weight.cols()});
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    h = tape.add(tape.matvec(tape.constant(matrix_tensor(layer.weight)), h), tape.constant(Tensor::vector(layer.bias)));
    if (l + 1 < mlp.layers.size()) h = tape.smooth_relu(h, mlp.smoothing);
  }
  tape.set_output(h);
  return tape;
}

/// The same arithmetic written out directly, without the tape.
inline Eigen::VectorXd mlp_straight_line(const Mlp& mlp, const Eigen::VectorXd& x) {
  Eigen::VectorXd h = x;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    h = mlp.layers[l].weight * h + mlp.layers[l].bias;
    if (l + 1 < mlp.layers.size())
      for (Index i = 0; i < h.size(); ++i) h(i) = smooth_relu(h(i), mlp.smoothing);
  }
  return h;
}

inline Eigen::VectorXd random_vector(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  return Eigen::VectorXd::NullaryExpr(n, [&] { return u(rng); });
}

/// Central finite differences of a scalar function.
inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
                                   double step) {
  Eigen::VectorXd g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd xp = x, xm = x;
    xp(i) += step;
    xm(i) -= step;
    g(i) = (f(xp) - f(xm)) / (2 * step);
  }
  return g;
}

inline double relative_error(const Eigen::VectorXd& got, const Eigen::VectorXd& want) {
  const double denom = std::max(want.norm(), 1e-12);
  return (got - want).norm() / denom;
}

}  // namespace hsets::testing
