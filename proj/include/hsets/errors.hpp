#pragma once

#include <stdexcept>
#include <string>

namespace hsets {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input or operand shapes that do not compose.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// An op on the tape has no second derivative.
class UnsupportedOpError : public Error {
 public:
  using Error::Error;
};

// Malformed model, mask, dataset or config file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

// A quantity that is mathematically undefined for the given input
// (zero-norm saliency, zero-variance correlation, imputation without boundary).
class UndefinedError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace hsets
