#include "hsets/autodiff.hpp"

#include <algorithm>
#include <string>

namespace hsets {
namespace {

using Vec = Eigen::VectorXd;
using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutRowMajorMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

struct ConvDims {
  Index height, width, in_ch, out_ch, kernel, out_h, out_w;
  int stride, pad;

  Index image_at(Index h, Index w, Index c) const { return (h * width + w) * in_ch + c; }
  Index kernel_at(Index co, Index ci, Index kh, Index kw) const {
    return ((co * in_ch + ci) * kernel + kh) * kernel + kw;
  }
  Index out_at(Index h, Index w, Index c) const { return (h * out_w + w) * out_ch + c; }
};

ConvDims conv_dims(const Shape& kernel, const Shape& image, int stride, int pad) {
  ConvDims d{};
  d.height = image[0];
  d.width = image[1];
  d.in_ch = image[2];
  d.out_ch = kernel[0];
  d.kernel = kernel[2];
  d.stride = stride;
  d.pad = pad;
  d.out_h = (d.height + 2 * pad - d.kernel) / stride + 1;
  d.out_w = (d.width + 2 * pad - d.kernel) / stride + 1;
  return d;
}

// Visits every (output, kernel, input) triple of a convolution with valid input coordinates.
template <typename F>
void for_each_tap(const ConvDims& d, F&& f) {
  for (Index oh = 0; oh < d.out_h; ++oh) {
    for (Index ow = 0; ow < d.out_w; ++ow) {
      for (Index kh = 0; kh < d.kernel; ++kh) {
        const Index ih = oh * d.stride - d.pad + kh;
        if (ih < 0 || ih >= d.height) continue;
        for (Index kw = 0; kw < d.kernel; ++kw) {
          const Index iw = ow * d.stride - d.pad + kw;
          if (iw < 0 || iw >= d.width) continue;
          for (Index co = 0; co < d.out_ch; ++co) {
            for (Index ci = 0; ci < d.in_ch; ++ci) {
              f(d.out_at(oh, ow, co), d.kernel_at(co, ci, kh, kw), d.image_at(ih, iw, ci));
            }
          }
        }
      }
    }
  }
}

void conv_accumulate(const ConvDims& d, const Vec& kernel, const Vec& image, Vec& out) {
  for_each_tap(d, [&](Index o, Index k, Index i) { out(o) += kernel(k) * image(i); });
}
void conv_input_adjoint(const ConvDims& d, const Vec& kernel, const Vec& out_bar, Vec& image_bar) {
  for_each_tap(d, [&](Index o, Index k, Index i) { image_bar(i) += kernel(k) * out_bar(o); });
}
void conv_kernel_adjoint(const ConvDims& d, const Vec& image, const Vec& out_bar, Vec& kernel_bar) {
  for_each_tap(d, [&](Index o, Index k, Index i) { kernel_bar(k) += image(i) * out_bar(o); });
}

Vec pool_forward(const Shape& in, int window, const Vec& x) {
  const Index oh = in[0] / window, ow = in[1] / window, c = in[2];
  Vec y = Vec::Zero(oh * ow * c);
  const double inv = 1.0 / (window * window);
  for (Index h = 0; h < oh * window; ++h)
    for (Index w = 0; w < ow * window; ++w)
      for (Index ch = 0; ch < c; ++ch)
        y(((h / window) * ow + w / window) * c + ch) += inv * x((h * in[1] + w) * c + ch);
  return y;
}

void pool_adjoint(const Shape& in, int window, const Vec& y_bar, Vec& x_bar) {
  const Index ow = in[1] / window, c = in[2];
  const double inv = 1.0 / (window * window);
  for (Index h = 0; h < (in[0] / window) * window; ++h)
    for (Index w = 0; w < ow * window; ++w)
      for (Index ch = 0; ch < c; ++ch)
        x_bar((h * in[1] + w) * c + ch) += inv * y_bar(((h / window) * ow + w / window) * c + ch);
}

Vec softmax_of(const Vec& z) {
  const double m = z.maxCoeff();
  Vec e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

Index channel_count(const Shape& s) { return s.back(); }

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::MatVec: return "matvec";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::ChannelBias: return "channel_bias";
    case OpKind::AvgPool: return "avg_pool";
    case OpKind::Reshape: return "reshape";
    case OpKind::SmoothRelu: return "smooth_relu";
    case OpKind::Relu: return "relu";
    case OpKind::Sum: return "sum";
    case OpKind::Select: return "select";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSumExp: return "log_sum_exp";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph construction

NodeId Tape::push(Node node) {
  if (node.lhs >= 0) node.active = node.active || nodes_[static_cast<std::size_t>(node.lhs)].active;
  if (node.rhs >= 0) node.active = node.active || nodes_[static_cast<std::size_t>(node.rhs)].active;
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  return {static_cast<int>(nodes_.size()) - 1};
}

void Tape::check(NodeId id) const {
  if (id.index < 0 || static_cast<std::size_t>(id.index) >= nodes_.size())
    throw IndexError("node id " + std::to_string(id.index) + " is not on the tape");
}

NodeId Tape::input(Shape shape) {
  Node n;
  n.kind = OpKind::Input;
  n.shape = std::move(shape);
  n.slot = static_cast<int>(input_nodes_.size());
  n.active = true;
  const NodeId id = push(std::move(n));
  input_nodes_.push_back(id.index);
  return id;
}

NodeId Tape::constant(Tensor value) {
  Node n;
  n.kind = OpKind::Constant;
  n.shape = value.shape();
  n.constant = std::move(value);
  return push(std::move(n));
}

namespace {
Tape::Node binary(OpKind kind, NodeId a, NodeId b, Shape shape) {
  Tape::Node n;
  n.kind = kind;
  n.lhs = a.index;
  n.rhs = b.index;
  n.shape = std::move(shape);
  return n;
}
Tape::Node unary(OpKind kind, NodeId a, Shape shape) {
  Tape::Node n;
  n.kind = kind;
  n.lhs = a.index;
  n.shape = std::move(shape);
  return n;
}
}  // namespace

NodeId Tape::add(NodeId a, NodeId b) {
  check(a), check(b);
  if (shape_size(node(a).shape) != shape_size(node(b).shape))
    throw ShapeError("add: operand sizes differ " + shape_string(node(a).shape) + " vs " + shape_string(node(b).shape));
  return push(binary(OpKind::Add, a, b, node(a).shape));
}

NodeId Tape::sub(NodeId a, NodeId b) {
  check(a), check(b);
  if (shape_size(node(a).shape) != shape_size(node(b).shape))
    throw ShapeError("sub: operand sizes differ " + shape_string(node(a).shape) + " vs " + shape_string(node(b).shape));
  return push(binary(OpKind::Sub, a, b, node(a).shape));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  check(a), check(b);
  if (shape_size(node(a).shape) != shape_size(node(b).shape))
    throw ShapeError("mul: operand sizes differ " + shape_string(node(a).shape) + " vs " + shape_string(node(b).shape));
  return push(binary(OpKind::Mul, a, b, node(a).shape));
}

NodeId Tape::scale(NodeId a, double factor) {
  check(a);
  Node n = unary(OpKind::Scale, a, node(a).shape);
  n.scale = factor;
  return push(std::move(n));
}

NodeId Tape::matvec(NodeId matrix, NodeId vec) {
  check(matrix), check(vec);
  const Shape& ms = node(matrix).shape;
  if (ms.size() != 2 || ms[1] != shape_size(node(vec).shape))
    throw ShapeError("matvec: matrix " + shape_string(ms) + " cannot multiply vector " +
                     shape_string(node(vec).shape));
  return push(binary(OpKind::MatVec, matrix, vec, Shape{ms[0]}));
}

NodeId Tape::conv2d(NodeId kernel, NodeId image, int stride, int pad) {
  check(kernel), check(image);
  const Shape& ks = node(kernel).shape;
  const Shape& is = node(image).shape;
  if (ks.size() != 4 || is.size() != 3 || ks[1] != is[2] || ks[2] != ks[3])
    throw ShapeError("conv2d: kernel " + shape_string(ks) + " incompatible with image " + shape_string(is));
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  const ConvDims d = conv_dims(ks, is, stride, pad);
  if (d.out_h < 1 || d.out_w < 1) throw ShapeError("conv2d: kernel larger than padded image");
  Node n = binary(OpKind::Conv2d, kernel, image, Shape{d.out_h, d.out_w, d.out_ch});
  n.stride = stride;
  n.pad = pad;
  return push(std::move(n));
}

NodeId Tape::channel_bias(NodeId image, NodeId bias) {
  check(image), check(bias);
  if (shape_size(node(bias).shape) != channel_count(node(image).shape))
    throw ShapeError("channel_bias: bias " + shape_string(node(bias).shape) + " does not match channels of " +
                     shape_string(node(image).shape));
  return push(binary(OpKind::ChannelBias, image, bias, node(image).shape));
}

NodeId Tape::avg_pool(NodeId image, int window) {
  check(image);
  const Shape& is = node(image).shape;
  if (is.size() != 3 || window < 1 || is[0] < window || is[1] < window)
    throw ShapeError("avg_pool: window " + std::to_string(window) + " does not fit " + shape_string(is));
  Node n = unary(OpKind::AvgPool, image, Shape{is[0] / window, is[1] / window, is[2]});
  n.window = window;
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, Shape shape) {
  check(a);
  if (shape_size(shape) != shape_size(node(a).shape))
    throw ShapeError("reshape: " + shape_string(node(a).shape) + " -> " + shape_string(shape));
  return push(unary(OpKind::Reshape, a, std::move(shape)));
}

NodeId Tape::smooth_relu(NodeId a, SmoothingConfig config) {
  check(a);
  Node n = unary(OpKind::SmoothRelu, a, node(a).shape);
  n.scale = SmoothingConfig::checked(config.tau).tau;
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  check(a);
  return push(unary(OpKind::Relu, a, node(a).shape));
}

NodeId Tape::sum(NodeId a) {
  check(a);
  return push(unary(OpKind::Sum, a, Shape{1}));
}

NodeId Tape::select(NodeId a, Index i) {
  check(a);
  if (i < 0 || i >= shape_size(node(a).shape)) throw IndexError("select: index " + std::to_string(i) + " out of range");
  Node n = unary(OpKind::Select, a, Shape{1});
  n.index = i;
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId a) {
  check(a);
  return push(unary(OpKind::Softmax, a, node(a).shape));
}

NodeId Tape::log_sum_exp(NodeId a) {
  check(a);
  return push(unary(OpKind::LogSumExp, a, Shape{1}));
}

void Tape::set_output(NodeId out) {
  check(out);
  output_ = out.index;
}

void Tape::require_output() const {
  if (output_ < 0) throw Error("tape has no output node");
}

const Shape& Tape::input_shape(std::size_t slot) const {
  if (slot >= input_nodes_.size()) throw IndexError("tape has no input slot " + std::to_string(slot));
  return nodes_[static_cast<std::size_t>(input_nodes_[slot])].shape;
}

const Shape& Tape::output_shape() const {
  require_output();
  return nodes_[static_cast<std::size_t>(output_)].shape;
}

Tensor Tape::value(NodeId id) const {
  check(id);
  if (!evaluated_) throw Error("tape has not been evaluated");
  return Tensor(node(id).shape, val(static_cast<std::size_t>(id.index)));
}

// ---------------------------------------------------------------------------
// Forward sweep

Tensor Tape::forward(std::span<const Tensor> inputs) {
  require_output();
  if (inputs.size() != input_nodes_.size())
    throw ShapeError("tape expects " + std::to_string(input_nodes_.size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  reversed_ = false;
  values_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    Vec& y = values_[i];
    const Vec* a = n.lhs >= 0 ? &val(static_cast<std::size_t>(n.lhs)) : nullptr;
    const Vec* b = n.rhs >= 0 ? &val(static_cast<std::size_t>(n.rhs)) : nullptr;
    switch (n.kind) {
      case OpKind::Input: {
        const Tensor& in = inputs[static_cast<std::size_t>(n.slot)];
        if (in.shape() != n.shape)
          throw ShapeError("input " + std::to_string(n.slot) + " has shape " + shape_string(in.shape()) +
                           ", tape expects " + shape_string(n.shape));
        y = in.data();
        break;
      }
      case OpKind::Constant: break;
      case OpKind::Add: y = *a + *b; break;
      case OpKind::Sub: y = *a - *b; break;
      case OpKind::Mul: y = a->cwiseProduct(*b); break;
      case OpKind::Scale: y = n.scale * *a; break;
      case OpKind::MatVec: {
        const Shape& ms = nodes_[static_cast<std::size_t>(n.lhs)].shape;
        y.noalias() = RowMajorMap(a->data(), ms[0], ms[1]) * *b;
        break;
      }
      case OpKind::Conv2d: {
        const ConvDims d = conv_dims(nodes_[static_cast<std::size_t>(n.lhs)].shape,
                                     nodes_[static_cast<std::size_t>(n.rhs)].shape, n.stride, n.pad);
        y.setZero(shape_size(n.shape));
        conv_accumulate(d, *a, *b, y);
        break;
      }
      case OpKind::ChannelBias: {
        const Index c = b->size();
        y = *a;
        for (Index p = 0; p < y.size(); p += c) y.segment(p, c) += *b;
        break;
      }
      case OpKind::AvgPool: y = pool_forward(nodes_[static_cast<std::size_t>(n.lhs)].shape, n.window, *a); break;
      case OpKind::Reshape: y = *a; break;
      case OpKind::SmoothRelu: {
        const SmoothingConfig cfg{n.scale};
        y = a->unaryExpr([cfg](double z) { return hsets::smooth_relu(z, cfg); });
        break;
      }
      case OpKind::Relu: y = a->cwiseMax(0.0); break;
      case OpKind::Sum: y = Vec::Constant(1, a->sum()); break;
      case OpKind::Select: y = Vec::Constant(1, (*a)(n.index)); break;
      case OpKind::Softmax: y = softmax_of(*a); break;
      case OpKind::LogSumExp: {
        const double m = a->maxCoeff();
        y = Vec::Constant(1, m + std::log((a->array() - m).exp().sum()));
        break;
      }
    }
  }
  evaluated_ = true;
  return Tensor(nodes_[static_cast<std::size_t>(output_)].shape, val(static_cast<std::size_t>(output_)));
}

// ---------------------------------------------------------------------------
// Reverse sweeps

void Tape::reverse(const Tensor& seed) {
  require_output();
  if (!evaluated_) throw Error("backward() requires a preceding forward()");
  const std::size_t out = static_cast<std::size_t>(output_);
  if (seed.size() != val(out).size()) throw ShapeError("backward: seed size does not match output");

  adjoints_.resize(nodes_.size());
  for (std::size_t i = 0; i <= out; ++i)
    if (nodes_[i].active) adjoints_[i].setZero(val(i).size());
  adjoints_[out] += seed.data();

  for (std::size_t ii = out + 1; ii-- > 0;) {
    const Node& n = nodes_[ii];
    if (!n.active || n.kind == OpKind::Input || n.kind == OpKind::Constant) continue;
    const Vec& yb = adjoints_[ii];
    const auto la = static_cast<std::size_t>(n.lhs);
    const auto lb = static_cast<std::size_t>(n.rhs);
    const bool act_a = n.lhs >= 0 && nodes_[la].active;
    const bool act_b = n.rhs >= 0 && nodes_[lb].active;
    switch (n.kind) {
      case OpKind::Add:
        if (act_a) adjoints_[la] += yb;
        if (act_b) adjoints_[lb] += yb;
        break;
      case OpKind::Sub:
        if (act_a) adjoints_[la] += yb;
        if (act_b) adjoints_[lb] -= yb;
        break;
      case OpKind::Mul:
        if (act_a) adjoints_[la] += val(lb).cwiseProduct(yb);
        if (act_b) adjoints_[lb] += val(la).cwiseProduct(yb);
        break;
      case OpKind::Scale: adjoints_[la] += n.scale * yb; break;
      case OpKind::MatVec: {
        const Shape& ms = nodes_[la].shape;
        if (act_a) MutRowMajorMap(adjoints_[la].data(), ms[0], ms[1]).noalias() += yb * val(lb).transpose();
        if (act_b) adjoints_[lb].noalias() += RowMajorMap(val(la).data(), ms[0], ms[1]).transpose() * yb;
        break;
      }
      case OpKind::Conv2d: {
        const ConvDims d = conv_dims(nodes_[la].shape, nodes_[lb].shape, n.stride, n.pad);
        if (act_a) conv_kernel_adjoint(d, val(lb), yb, adjoints_[la]);
        if (act_b) conv_input_adjoint(d, val(la), yb, adjoints_[lb]);
        break;
      }
      case OpKind::ChannelBias: {
        if (act_a) adjoints_[la] += yb;
        if (act_b) {
          const Index c = val(lb).size();
          for (Index p = 0; p < yb.size(); p += c) adjoints_[lb] += yb.segment(p, c);
        }
        break;
      }
      case OpKind::AvgPool: pool_adjoint(nodes_[la].shape, n.window, yb, adjoints_[la]); break;
      case OpKind::Reshape: adjoints_[la] += yb; break;
      case OpKind::SmoothRelu: {
        const SmoothingConfig cfg{n.scale};
        adjoints_[la] += val(la).unaryExpr([cfg](double z) { return smooth_relu_derivative(z, cfg); }).cwiseProduct(yb);
        break;
      }
      case OpKind::Relu:
        adjoints_[la] += (val(la).array() > 0.0).cast<double>().matrix().cwiseProduct(yb);
        break;
      case OpKind::Sum: adjoints_[la].array() += yb(0); break;
      case OpKind::Select: adjoints_[la](n.index) += yb(0); break;
      case OpKind::Softmax: {
        const Vec& s = val(ii);
        adjoints_[la] += s.cwiseProduct((yb.array() - s.dot(yb)).matrix());
        break;
      }
      case OpKind::LogSumExp: adjoints_[la] += yb(0) * softmax_of(val(la)); break;
      case OpKind::Input:
      case OpKind::Constant: break;
    }
  }

  reversed_ = true;
}

std::vector<Tensor> Tape::backward(const Tensor& seed) {
  reverse(seed);
  const std::size_t out = static_cast<std::size_t>(output_);
  std::vector<Tensor> grads;
  grads.reserve(input_nodes_.size());
  for (int id : input_nodes_) {
    const auto i = static_cast<std::size_t>(id);
    grads.emplace_back(nodes_[i].shape, static_cast<std::size_t>(id) <= out ? adjoints_[i] : Vec::Zero(val(i).size()));
  }
  return grads;
}

const Eigen::VectorXd& Tape::input_adjoint(std::size_t slot) const {
  if (!reversed_) throw Error("input_adjoint() requires a preceding reverse()");
  if (slot >= input_nodes_.size()) throw IndexError("input slot out of range");
  const auto i = static_cast<std::size_t>(input_nodes_[slot]);
  if (input_nodes_[slot] > output_) throw Error("input does not reach the output");
  return adjoints_[i];
}

std::vector<Tensor> Tape::second_order(std::span<const Tensor> inputs, std::span<const Tensor> tangents,
                                       const Tensor& seed) {
  if (tangents.size() != input_nodes_.size()) throw ShapeError("second_order: one tangent per input required");
  for (std::size_t i = 0; i <= static_cast<std::size_t>(std::max(output_, 0)) && i < nodes_.size(); ++i)
    if (nodes_[i].active && nodes_[i].kind == OpKind::Relu)
      throw UnsupportedOpError(std::string("second-order sweep through '") + op_name(nodes_[i].kind) +
                               "' which has no second derivative");
  forward(inputs);
  const std::size_t out = static_cast<std::size_t>(output_);
  if (seed.size() != val(out).size()) throw ShapeError("second_order: seed size does not match output");

  // Tangent sweep.
  tangents_.resize(nodes_.size());
  for (std::size_t i = 0; i <= out; ++i) {
    const Node& n = nodes_[i];
    if (!n.active) continue;
    const auto la = static_cast<std::size_t>(n.lhs);
    const auto lb = static_cast<std::size_t>(n.rhs);
    const bool act_a = n.lhs >= 0 && nodes_[la].active;
    const bool act_b = n.rhs >= 0 && nodes_[lb].active;
    Vec& t = tangents_[i];
    t.setZero(val(i).size());
    switch (n.kind) {
      case OpKind::Input: {
        const Tensor& dir = tangents[static_cast<std::size_t>(n.slot)];
        if (dir.size() == 0) break;
        if (dir.size() != t.size()) throw ShapeError("tangent " + std::to_string(n.slot) + " has wrong size");
        t = dir.data();
        break;
      }
      case OpKind::Constant: break;
      case OpKind::Add:
        if (act_a) t += tangents_[la];
        if (act_b) t += tangents_[lb];
        break;
      case OpKind::Sub:
        if (act_a) t += tangents_[la];
        if (act_b) t -= tangents_[lb];
        break;
      case OpKind::Mul:
        if (act_a) t += tangents_[la].cwiseProduct(val(lb));
        if (act_b) t += val(la).cwiseProduct(tangents_[lb]);
        break;
      case OpKind::Scale: t = n.scale * tangents_[la]; break;
      case OpKind::MatVec: {
        const Shape& ms = nodes_[la].shape;
        if (act_a) t.noalias() += RowMajorMap(tangents_[la].data(), ms[0], ms[1]) * val(lb);
        if (act_b) t.noalias() += RowMajorMap(val(la).data(), ms[0], ms[1]) * tangents_[lb];
        break;
      }
      case OpKind::Conv2d: {
        const ConvDims d = conv_dims(nodes_[la].shape, nodes_[lb].shape, n.stride, n.pad);
        if (act_a) conv_accumulate(d, tangents_[la], val(lb), t);
        if (act_b) conv_accumulate(d, val(la), tangents_[lb], t);
        break;
      }
      case OpKind::ChannelBias: {
        if (act_a) t += tangents_[la];
        if (act_b) {
          const Index c = val(lb).size();
          for (Index p = 0; p < t.size(); p += c) t.segment(p, c) += tangents_[lb];
        }
        break;
      }
      case OpKind::AvgPool: t = pool_forward(nodes_[la].shape, n.window, tangents_[la]); break;
      case OpKind::Reshape: t = tangents_[la]; break;
      case OpKind::SmoothRelu: {
        const SmoothingConfig cfg{n.scale};
        t = val(la).unaryExpr([cfg](double z) { return smooth_relu_derivative(z, cfg); }).cwiseProduct(tangents_[la]);
        break;
      }
      case OpKind::Relu: break;  // rejected above
      case OpKind::Sum: t(0) = tangents_[la].sum(); break;
      case OpKind::Select: t(0) = tangents_[la](n.index); break;
      case OpKind::Softmax: {
        const Vec& s = val(i);
        t = s.cwiseProduct((tangents_[la].array() - s.dot(tangents_[la])).matrix());
        break;
      }
      case OpKind::LogSumExp: t(0) = softmax_of(val(la)).dot(tangents_[la]); break;
    }
  }

  // Reverse sweep carrying adjoints and their tangents.
  adjoints_.resize(nodes_.size());
  tangent_adjoints_.resize(nodes_.size());
  for (std::size_t i = 0; i <= out; ++i) {
    if (!nodes_[i].active) continue;
    adjoints_[i].setZero(val(i).size());
    tangent_adjoints_[i].setZero(val(i).size());
  }
  adjoints_[out] += seed.data();

  for (std::size_t ii = out + 1; ii-- > 0;) {
    const Node& n = nodes_[ii];
    if (!n.active || n.kind == OpKind::Input || n.kind == OpKind::Constant) continue;
    const Vec& yb = adjoints_[ii];
    const Vec& tyb = tangent_adjoints_[ii];
    const auto la = static_cast<std::size_t>(n.lhs);
    const auto lb = static_cast<std::size_t>(n.rhs);
    const bool act_a = n.lhs >= 0 && nodes_[la].active;
    const bool act_b = n.rhs >= 0 && nodes_[lb].active;
    switch (n.kind) {
      case OpKind::Add:
        if (act_a) adjoints_[la] += yb, tangent_adjoints_[la] += tyb;
        if (act_b) adjoints_[lb] += yb, tangent_adjoints_[lb] += tyb;
        break;
      case OpKind::Sub:
        if (act_a) adjoints_[la] += yb, tangent_adjoints_[la] += tyb;
        if (act_b) adjoints_[lb] -= yb, tangent_adjoints_[lb] -= tyb;
        break;
      case OpKind::Mul:
        if (act_a) {
          adjoints_[la] += val(lb).cwiseProduct(yb);
          tangent_adjoints_[la] += val(lb).cwiseProduct(tyb);
          if (act_b) tangent_adjoints_[la] += tangents_[lb].cwiseProduct(yb);
        }
        if (act_b) {
          adjoints_[lb] += val(la).cwiseProduct(yb);
          tangent_adjoints_[lb] += val(la).cwiseProduct(tyb);
          if (act_a) tangent_adjoints_[lb] += tangents_[la].cwiseProduct(yb);
        }
        break;
      case OpKind::Scale:
        adjoints_[la] += n.scale * yb;
        tangent_adjoints_[la] += n.scale * tyb;
        break;
      case OpKind::MatVec: {
        const Index rows = nodes_[la].shape[0], cols = nodes_[la].shape[1];
        if (act_a) {
          MutRowMajorMap(adjoints_[la].data(), rows, cols).noalias() += yb * val(lb).transpose();
          MutRowMajorMap ta(tangent_adjoints_[la].data(), rows, cols);
          ta.noalias() += tyb * val(lb).transpose();
          if (act_b) ta.noalias() += yb * tangents_[lb].transpose();
        }
        if (act_b) {
          const RowMajorMap w(val(la).data(), rows, cols);
          adjoints_[lb].noalias() += w.transpose() * yb;
          tangent_adjoints_[lb].noalias() += w.transpose() * tyb;
          if (act_a) tangent_adjoints_[lb].noalias() += RowMajorMap(tangents_[la].data(), rows, cols).transpose() * yb;
        }
        break;
      }
      case OpKind::Conv2d: {
        const ConvDims d = conv_dims(nodes_[la].shape, nodes_[lb].shape, n.stride, n.pad);
        if (act_a) {
          conv_kernel_adjoint(d, val(lb), yb, adjoints_[la]);
          conv_kernel_adjoint(d, val(lb), tyb, tangent_adjoints_[la]);
          if (act_b) conv_kernel_adjoint(d, tangents_[lb], yb, tangent_adjoints_[la]);
        }
        if (act_b) {
          conv_input_adjoint(d, val(la), yb, adjoints_[lb]);
          conv_input_adjoint(d, val(la), tyb, tangent_adjoints_[lb]);
          if (act_a) conv_input_adjoint(d, tangents_[la], yb, tangent_adjoints_[lb]);
        }
        break;
      }
      case OpKind::ChannelBias: {
        if (act_a) adjoints_[la] += yb, tangent_adjoints_[la] += tyb;
        if (act_b) {
          const Index c = val(lb).size();
          for (Index p = 0; p < yb.size(); p += c) {
            adjoints_[lb] += yb.segment(p, c);
            tangent_adjoints_[lb] += tyb.segment(p, c);
          }
        }
        break;
      }
      case OpKind::AvgPool:
        pool_adjoint(nodes_[la].shape, n.window, yb, adjoints_[la]);
        pool_adjoint(nodes_[la].shape, n.window, tyb, tangent_adjoints_[la]);
        break;
      case OpKind::Reshape:
        adjoints_[la] += yb;
        tangent_adjoints_[la] += tyb;
        break;
      case OpKind::SmoothRelu: {
        const SmoothingConfig cfg{n.scale};
        const Vec& z = val(la);
        const Vec d1 = z.unaryExpr([cfg](double v) { return smooth_relu_derivative(v, cfg); });
        const Vec d2 = z.unaryExpr([cfg](double v) { return smooth_relu_second_derivative(v, cfg); });
        adjoints_[la] += d1.cwiseProduct(yb);
        tangent_adjoints_[la] += d1.cwiseProduct(tyb) + d2.cwiseProduct(tangents_[la]).cwiseProduct(yb);
        break;
      }
      case OpKind::Relu: break;  // rejected above
      case OpKind::Sum:
        adjoints_[la].array() += yb(0);
        tangent_adjoints_[la].array() += tyb(0);
        break;
      case OpKind::Select:
        adjoints_[la](n.index) += yb(0);
        tangent_adjoints_[la](n.index) += tyb(0);
        break;
      case OpKind::Softmax: {
        const Vec& s = val(ii);
        const Vec& sd = tangents_[ii];
        const double s_yb = s.dot(yb);
        adjoints_[la] += s.cwiseProduct((yb.array() - s_yb).matrix());
        tangent_adjoints_[la] += sd.cwiseProduct((yb.array() - s_yb).matrix()) +
                                 s.cwiseProduct((tyb.array() - sd.dot(yb) - s.dot(tyb)).matrix());
        break;
      }
      case OpKind::LogSumExp: {
        const Vec s = softmax_of(val(la));
        const Vec sd = s.cwiseProduct((tangents_[la].array() - s.dot(tangents_[la])).matrix());
        adjoints_[la] += yb(0) * s;
        tangent_adjoints_[la] += yb(0) * sd + tyb(0) * s;
        break;
      }
      case OpKind::Input:
      case OpKind::Constant: break;
    }
  }

  std::vector<Tensor> result;
  result.reserve(input_nodes_.size());
  for (int id : input_nodes_) {
    const auto i = static_cast<std::size_t>(id);
    result.emplace_back(nodes_[i].shape, i <= out ? tangent_adjoints_[i] : Vec::Zero(val(i).size()));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Single-input convenience layer

namespace {

void require_single_input(const Tape& tape, const Tensor& x) {
  if (tape.input_count() != 1) throw ShapeError("expected a single-input tape");
  if (x.shape() != tape.input_shape())
    throw ShapeError("input shape " + shape_string(x.shape()) + " does not match tape input " +
                     shape_string(tape.input_shape()));
}

Tensor unit_seed(const Tape& tape, Index output_index) {
  const Index n = shape_size(tape.output_shape());
  if (output_index < 0 || output_index >= n)
    throw IndexError("class index " + std::to_string(output_index) + " out of range for " + std::to_string(n) +
                     " outputs");
  Tensor seed(tape.output_shape());
  seed[output_index] = 1.0;
  return seed;
}

}  // namespace

Tensor forward(Tape& tape, const Tensor& inputs) {
  require_single_input(tape, inputs);
  return tape.forward(inputs);
}

Tensor gradient(Tape& tape, const Tensor& inputs, Index output_index) {
  require_single_input(tape, inputs);
  const Tensor seed = unit_seed(tape, output_index);
  tape.forward(inputs);
  return std::move(tape.backward(seed).front());
}

Tensor hvp(Tape& tape, const Tensor& inputs, Index output_index, const Tensor& v) {
  require_single_input(tape, inputs);
  if (v.size() != inputs.size()) throw ShapeError("hvp: direction has wrong size");
  const Tensor seed = unit_seed(tape, output_index);
  const Tensor dir = v.reshaped(inputs.shape());
  return std::move(tape.second_order(std::span<const Tensor>(&inputs, 1), std::span<const Tensor>(&dir, 1), seed).front());
}

Tensor hessian_row(Tape& tape, const Tensor& inputs, Index output_index, Index i) {
  if (i < 0 || i >= inputs.size())
    throw IndexError("hessian row " + std::to_string(i) + " out of range for " + std::to_string(inputs.size()) +
                     " features");
  Tensor e(inputs.shape());
  e[i] = 1.0;
  return hvp(tape, inputs, output_index, e);
}

}  // namespace hsets
