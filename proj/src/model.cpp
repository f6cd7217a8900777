#include "hsets/model.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>

namespace hsets {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

const char* kMagic = "hsets-model 1";

std::string layer_line(const Layer& layer) {
  std::ostringstream os;
  std::visit(Overloaded{
                 [&](const DenseLayer& l) { os << "dense " << l.in << ' ' << l.out; },
                 [&](const Conv2dLayer& l) {
                   os << "conv2d " << l.in_channels << ' ' << l.out_channels << ' ' << l.kernel << ' ' << l.stride
                      << ' ' << l.pad;
                 },
                 [&](const SmoothReluLayer& l) { os << "smooth_relu " << std::setprecision(17) << l.tau; },
                 [&](const FlattenLayer&) { os << "flatten"; },
                 [&](const AvgPoolLayer& l) { os << "avgpool " << l.window; },
             },
             layer);
  return os.str();
}

// Builds the network on `tape` from `image`; `param` supplies the weight and bias nodes of layer i.
NodeId build_network(Tape& tape, const NetworkSpec& spec, NodeId image,
                     const std::function<std::pair<NodeId, NodeId>(std::size_t)>& param) {
  NodeId h = image;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    std::visit(Overloaded{
                   [&](const DenseLayer& l) {
                     if (tape.node(h).shape.size() != 1) h = tape.reshape(h, Shape{l.in});
                     const auto [w, b] = param(i);
                     h = tape.add(tape.matvec(w, h), b);
                   },
                   [&](const Conv2dLayer& l) {
                     const auto [w, b] = param(i);
                     h = tape.channel_bias(tape.conv2d(w, h, l.stride, l.pad), b);
                   },
                   [&](const SmoothReluLayer& l) { h = tape.smooth_relu(h, SmoothingConfig{l.tau}); },
                   [&](const FlattenLayer&) { h = tape.reshape(h, Shape{shape_size(tape.node(h).shape)}); },
                   [&](const AvgPoolLayer& l) { h = tape.avg_pool(h, l.window); },
               },
               layer);
  }
  return h;
}

void put_f32_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xffu));
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[k]) << (8 * k);
  return std::bit_cast<float>(bits);
}

}  // namespace

// ---------------------------------------------------------------------------
// NetworkSpec

std::vector<Shape> NetworkSpec::layer_shapes() const {
  std::vector<Shape> shapes;
  Shape cur = input.shape();
  if (input.height < 1 || input.width < 1 || input.channels < 1) throw ShapeError("network input shape must be positive");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + " (" + layer_line(layers[i]) + ")";
    std::visit(Overloaded{
                   [&](const DenseLayer& l) {
                     if (l.in < 1 || l.out < 1 || shape_size(cur) != l.in)
                       throw ShapeError(where + ": expects " + std::to_string(l.in) + " inputs, previous shape is " +
                                        shape_string(cur));
                     cur = Shape{l.out};
                   },
                   [&](const Conv2dLayer& l) {
                     if (cur.size() != 3 || cur[2] != l.in_channels || l.kernel < 1 || l.out_channels < 1 ||
                         l.stride < 1 || l.pad < 0)
                       throw ShapeError(where + ": incompatible with input " + shape_string(cur));
                     const Index oh = (cur[0] + 2 * l.pad - l.kernel) / l.stride + 1;
                     const Index ow = (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1;
                     if (cur[0] + 2 * l.pad < l.kernel || cur[1] + 2 * l.pad < l.kernel)
                       throw ShapeError(where + ": kernel larger than input " + shape_string(cur));
                     cur = Shape{oh, ow, l.out_channels};
                   },
                   [&](const SmoothReluLayer& l) {
                     if (!(l.tau > 0.0)) throw ShapeError(where + ": tau must be positive");
                   },
                   [&](const FlattenLayer&) { cur = Shape{shape_size(cur)}; },
                   [&](const AvgPoolLayer& l) {
                     if (cur.size() != 3 || l.window < 1 || cur[0] < l.window || cur[1] < l.window)
                       throw ShapeError(where + ": window does not fit " + shape_string(cur));
                     cur = Shape{cur[0] / l.window, cur[1] / l.window, cur[2]};
                   },
               },
               layers[i]);
    shapes.push_back(cur);
  }
  return shapes;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw ShapeError("network has no layers");
  if (classes < 1) throw ShapeError("network must have at least one class");
  const auto shapes = layer_shapes();
  if (shapes.back().size() != 1 || shapes.back()[0] != classes)
    throw ShapeError("final layer produces " + shape_string(shapes.back()) + ", expected " + std::to_string(classes) +
                     " logits");
}

NetworkSpec NetworkSpec::reference_mlp(ImageShape input, Index classes, double tau) {
  NetworkSpec spec;
  spec.input = input;
  spec.classes = classes;
  spec.layers = {DenseLayer{input.size(), 128}, SmoothReluLayer{tau}, DenseLayer{128, classes}};
  return spec;
}

NetworkSpec NetworkSpec::reference_cnn(ImageShape input, Index classes, double tau) {
  NetworkSpec spec;
  spec.input = input;
  spec.classes = classes;
  spec.layers = {Conv2dLayer{input.channels, 8, 5}, SmoothReluLayer{tau}, AvgPoolLayer{2},
                 Conv2dLayer{8, 16, 5},             SmoothReluLayer{tau}, AvgPoolLayer{2},
                 FlattenLayer{}};
  const Shape last = spec.layer_shapes().back();
  spec.layers.push_back(DenseLayer{shape_size(last), classes});
  return spec;
}

// ---------------------------------------------------------------------------
// Weights

bool has_parameters(const Layer& layer) {
  return std::holds_alternative<DenseLayer>(layer) || std::holds_alternative<Conv2dLayer>(layer);
}

std::pair<Shape, Shape> parameter_shapes(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return {Shape{d->out, d->in}, Shape{d->out}};
  if (const auto* c = std::get_if<Conv2dLayer>(&layer))
    return {Shape{c->out_channels, c->in_channels, c->kernel, c->kernel}, Shape{c->out_channels}};
  return {Shape{}, Shape{}};
}

bool Weights::all_finite() const {
  return std::all_of(layers.begin(), layers.end(),
                     [](const LayerParams& p) { return p.weight.all_finite() && p.bias.all_finite(); });
}

bool operator==(const Weights& a, const Weights& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i)
    if (!(a.layers[i].weight == b.layers[i].weight) || !(a.layers[i].bias == b.layers[i].bias)) return false;
  return true;
}

void validate_weights(const NetworkSpec& spec, const Weights& weights) {
  spec.validate();
  if (weights.layers.size() != spec.layers.size())
    throw ShapeError("weights have " + std::to_string(weights.layers.size()) + " layers, spec has " +
                     std::to_string(spec.layers.size()));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerParams& p = weights.layers[i];
    if (!has_parameters(spec.layers[i])) {
      if (p.weight.size() != 0 || p.bias.size() != 0)
        throw ShapeError("layer " + std::to_string(i) + " takes no parameters");
      continue;
    }
    const auto [ws, bs] = parameter_shapes(spec.layers[i]);
    if (p.weight.shape() != ws || p.bias.shape() != bs)
      throw ShapeError("layer " + std::to_string(i) + " parameters " + shape_string(p.weight.shape()) + "/" +
                       shape_string(p.bias.shape()) + " do not match " + shape_string(ws) + "/" + shape_string(bs));
    if (!p.weight.all_finite() || !p.bias.all_finite())
      throw ShapeError("layer " + std::to_string(i) + " has non-finite parameters");
  }
}

Weights init_weights(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Weights w;
  for (const Layer& layer : spec.layers) {
    LayerParams p;
    if (has_parameters(layer)) {
      const auto [ws, bs] = parameter_shapes(layer);
      p.weight = Tensor(ws);
      p.bias = Tensor(bs);
      const Index fan_in = shape_size(ws) / ws[0];
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (Index k = 0; k < p.weight.size(); ++k) p.weight[k] = stddev * normal(rng);
    }
    w.layers.push_back(std::move(p));
  }
  return w;
}

// ---------------------------------------------------------------------------
// Evaluation

Tape build_tape(const NetworkSpec& spec, const Weights& weights) {
  validate_weights(spec, weights);
  Tape tape;
  const NodeId image = tape.input(spec.input.shape());
  const NodeId out = build_network(tape, spec, image, [&](std::size_t i) {
    return std::pair{tape.constant(weights.layers[i].weight), tape.constant(weights.layers[i].bias)};
  });
  tape.set_output(out);
  return tape;
}

Tensor predict(const NetworkSpec& spec, const Weights& weights, const Tensor& image) {
  Tape tape = build_tape(spec, weights);
  return forward(tape, image);
}

Index argmax(const Tensor& logits) {
  Index best = 0;
  logits.data().maxCoeff(&best);
  return best;
}

double accuracy(Classifier& classifier, const Dataset& data) {
  if (data.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (classifier.predict_class(data.images[i]) == data.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Training

Weights train_sgd(const NetworkSpec& spec, const Dataset& data, const TrainConfig& config) {
  return train_sgd(spec, data, config, init_weights(spec, config.seed));
}

Weights train_sgd(const NetworkSpec& spec, const Dataset& data, const TrainConfig& config, Weights initial) {
  validate_weights(spec, initial);
  if (data.empty()) throw TrainingError("training set is empty", 0);
  if (!(config.lr > 0.0)) throw TrainingError("learning rate must be positive", 0);
  if (config.batch < 1 || config.epochs < 0) throw TrainingError("batch must be >= 1 and epochs >= 0", 0);
  if (data.shape != spec.input) throw ShapeError("dataset image shape does not match the network input");
  data.validate();
  if (config.epochs == 0) return initial;

  // Inputs: image, one-hot label, then weight and bias of every parameterised layer.
  Tape tape;
  const NodeId image = tape.input(spec.input.shape());
  const NodeId onehot = tape.input(Shape{spec.classes});
  std::vector<std::size_t> param_layers;
  const NodeId logits = build_network(tape, spec, image, [&](std::size_t i) {
    const auto [ws, bs] = parameter_shapes(spec.layers[i]);
    param_layers.push_back(i);
    const NodeId w = tape.input(ws);
    const NodeId b = tape.input(bs);
    return std::pair{w, b};
  });
  tape.set_output(tape.sub(tape.log_sum_exp(logits), tape.sum(tape.mul(onehot, logits))));

  std::vector<Tensor> inputs(2 + 2 * param_layers.size());
  for (std::size_t k = 0; k < param_layers.size(); ++k) {
    inputs[2 + 2 * k] = initial.layers[param_layers[k]].weight;
    inputs[3 + 2 * k] = initial.layers[param_layers[k]].bias;
  }
  std::vector<Eigen::VectorXd> accum(inputs.size());

  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(data.size());
  const Tensor one = Tensor::scalar(1.0);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch));
      for (std::size_t k = 2; k < inputs.size(); ++k) accum[k].setZero(inputs[k].size());
      for (std::size_t s = start; s < stop; ++s) {
        const std::size_t idx = order[s];
        inputs[0] = data.images[idx];
        inputs[1] = Tensor(Shape{spec.classes});
        inputs[1][data.labels[idx]] = 1.0;
        const double loss = tape.forward(inputs)[0];
        if (!std::isfinite(loss))
          throw TrainingError("training diverged (loss is not finite) in epoch " + std::to_string(epoch), epoch);
        tape.reverse(one);
        for (std::size_t k = 2; k < inputs.size(); ++k) accum[k] += tape.input_adjoint(k);
      }
      const double step = config.lr / static_cast<double>(stop - start);
      for (std::size_t k = 2; k < inputs.size(); ++k) inputs[k].data() -= step * accum[k];
    }
    for (std::size_t k = 2; k < inputs.size(); ++k)
      if (!inputs[k].all_finite())
        throw TrainingError("training diverged (non-finite weights) in epoch " + std::to_string(epoch), epoch);
  }

  Weights out = std::move(initial);
  for (std::size_t k = 0; k < param_layers.size(); ++k) {
    out.layers[param_layers[k]].weight = std::move(inputs[2 + 2 * k]);
    out.layers[param_layers[k]].bias = std::move(inputs[3 + 2 * k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model files

std::string model_header(const NetworkSpec& spec) {
  std::size_t blob = 0;
  for (const Layer& l : spec.layers) {
    const auto [ws, bs] = parameter_shapes(l);
    if (has_parameters(l)) blob += 4 * static_cast<std::size_t>(shape_size(ws) + shape_size(bs));
  }
  std::ostringstream os;
  os << kMagic << '\n'
     << "dtype float32\n"
     << "endianness little\n"
     << "input " << spec.input.height << ' ' << spec.input.width << ' ' << spec.input.channels << '\n'
     << "classes " << spec.classes << '\n'
     << "layers " << spec.layers.size() << '\n';
  for (const Layer& l : spec.layers) os << layer_line(l) << '\n';
  os << "blob_bytes " << blob << '\n' << "end\n";
  return os.str();
}

void save_model(const NetworkSpec& spec, const Weights& weights, const std::filesystem::path& path) {
  validate_weights(spec, weights);
  std::string out = model_header(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!has_parameters(spec.layers[i])) continue;
    for (const Tensor* t : {&weights.layers[i].weight, &weights.layers[i].bias})
      for (Index k = 0; k < t->size(); ++k) put_f32_le(out, static_cast<float>((*t)[k]));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open model file for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("failed writing model file: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open model file: " + path.string());
  std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto next_line = [&]() -> std::string {
    const std::size_t nl = content.find('\n', pos);
    if (nl == std::string::npos) throw FormatError("malformed header: unexpected end of file");
    std::string line = content.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  auto expect_key = [&](const std::string& key) {
    std::istringstream is(next_line());
    std::string k;
    is >> k;
    if (k != key) throw FormatError("malformed header: expected '" + key + "', found '" + k + "'");
    return is;
  };
  auto fail_if = [](bool bad, const std::string& what) {
    if (bad) throw FormatError("malformed header: " + what);
  };

  if (next_line() != kMagic) throw FormatError("malformed header: missing '" + std::string(kMagic) + "' magic line");
  {
    std::string v;
    expect_key("dtype") >> v;
    if (v != "float32") throw FormatError("unsupported dtype '" + v + "'");
    expect_key("endianness") >> v;
    if (v != "little") throw FormatError("unsupported endianness '" + v + "'");
  }
  Model model;
  {
    auto is = expect_key("input");
    is >> model.spec.input.height >> model.spec.input.width >> model.spec.input.channels;
    fail_if(!is, "bad input line");
  }
  {
    auto is = expect_key("classes");
    is >> model.spec.classes;
    fail_if(!is, "bad classes line");
  }
  std::size_t count = 0;
  {
    auto is = expect_key("layers");
    is >> count;
    fail_if(!is, "bad layers line");
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream is(next_line());
    std::string kind;
    is >> kind;
    if (kind == "dense") {
      DenseLayer l;
      is >> l.in >> l.out;
      fail_if(!is, "bad dense layer");
      model.spec.layers.emplace_back(l);
    } else if (kind == "conv2d") {
      Conv2dLayer l;
      is >> l.in_channels >> l.out_channels >> l.kernel >> l.stride >> l.pad;
      fail_if(!is, "bad conv2d layer");
      model.spec.layers.emplace_back(l);
    } else if (kind == "smooth_relu") {
      SmoothReluLayer l;
      is >> l.tau;
      fail_if(!is, "bad smooth_relu layer");
      model.spec.layers.emplace_back(l);
    } else if (kind == "flatten") {
      model.spec.layers.emplace_back(FlattenLayer{});
    } else if (kind == "avgpool") {
      AvgPoolLayer l;
      is >> l.window;
      fail_if(!is, "bad avgpool layer");
      model.spec.layers.emplace_back(l);
    } else {
      throw FormatError("unsupported layer kind '" + kind + "'");
    }
  }
  std::size_t declared = 0;
  {
    auto is = expect_key("blob_bytes");
    is >> declared;
    fail_if(!is, "bad blob_bytes line");
  }
  if (next_line() != "end") throw FormatError("malformed header: missing 'end' line");

  try {
    model.spec.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("inconsistent layer list: ") + e.what());
  }

  std::size_t expected = 0;
  for (const Layer& l : model.spec.layers)
    if (has_parameters(l)) {
      const auto [ws, bs] = parameter_shapes(l);
      expected += 4 * static_cast<std::size_t>(shape_size(ws) + shape_size(bs));
    }
  if (declared != expected)
    throw FormatError("blob_bytes " + std::to_string(declared) + " does not match layer shapes (" +
                      std::to_string(expected) + " bytes)");
  const std::size_t actual = content.size() - pos;
  if (actual != expected)
    throw FormatError("blob length mismatch: expected " + std::to_string(expected) + " bytes, got " +
                      std::to_string(actual));

  const auto* blob = reinterpret_cast<const unsigned char*>(content.data() + pos);
  for (const Layer& l : model.spec.layers) {
    LayerParams p;
    if (has_parameters(l)) {
      const auto [ws, bs] = parameter_shapes(l);
      p.weight = Tensor(ws);
      p.bias = Tensor(bs);
      for (Tensor* t : {&p.weight, &p.bias})
        for (Index k = 0; k < t->size(); ++k, blob += 4) (*t)[k] = static_cast<double>(get_f32_le(blob));
    }
    model.weights.layers.push_back(std::move(p));
  }
  validate_weights(model.spec, model.weights);
  return model;
}

}  // namespace hsets
