#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "hsets/errors.hpp"

namespace hsets {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Dense row-major tensor: a shape plus a flat coefficient vector.
template <typename Scalar>
class TensorT {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  TensorT() = default;
  explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(shape_size(shape_))) {}
  TensorT(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static TensorT scalar(Scalar value) {
    Vector v(1);
    v(0) = value;
    return TensorT(Shape{1}, std::move(v));
  }
  static TensorT vector(const Vector& v) { return TensorT(Shape{v.size()}, v); }

  const Shape& shape() const { return shape_; }
  Index size() const { return data_.size(); }
  const Vector& data() const { return data_; }
  Vector& data() { return data_; }

  Scalar& operator[](Index i) { return data_(i); }
  Scalar operator[](Index i) const { return data_(i); }

  /// Same data under a new shape of equal size.
  TensorT reshaped(Shape shape) const { return TensorT(std::move(shape), data_); }

  template <typename Other>
  TensorT<Other> cast() const {
    return TensorT<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const TensorT& a, const TensorT& b) {
    return a.shape_ == b.shape_ && a.data_.size() == b.data_.size() &&
           (a.data_.array() == b.data_.array()).all();
  }

 private:
  Shape shape_;
  Vector data_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

/// Spatial layout of an H x W x C image tensor.
struct ImageShape {
  Index height = 0;
  Index width = 0;
  Index channels = 1;

  Index pixels() const { return height * width; }
  Index size() const { return height * width * channels; }
  Shape shape() const { return {height, width, channels}; }

  static ImageShape of(const Shape& s) {
    if (s.size() != 3) throw ShapeError("expected an H x W x C shape, got " + shape_string(s));
    return {s[0], s[1], s[2]};
  }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Channels per pixel: the last extent of an H x W x C image, 1 for flat inputs.
inline Index pixel_channels(const Shape& s) { return s.size() == 3 ? s[2] : 1; }

/// Per-pixel scores over an H x W grid, row-major.
using SaliencyMap = Eigen::VectorXd;

}  // namespace hsets
