#pragma once

#include <stdexcept>
#include <string>

namespace p2v {

// Caller violated a precondition (empty cloud, bad k, unknown id, ...).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Missing or malformed files on disk.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value produced inside the network; carries the layer name.
class NumericalFailure : public std::runtime_error {
 public:
  NumericalFailure(std::string layer, const std::string& what)
      : std::runtime_error(what + " (layer " + layer + ")"), layer_(std::move(layer)) {}

  const std::string& layer() const noexcept { return layer_; }

 private:
  std::string layer_;
};

}  // namespace p2v
