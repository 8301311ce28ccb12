#pragma once

#include <stdexcept>
#include <string>

namespace aepl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeMismatchError : public Error {
 public:
  using Error::Error;
};

class UnknownLabelError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Phantom parameters that cannot be realized inside the requested volume.
class SpecInfeasibleError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

class NonFiniteLossError : public Error {
 public:
  NonFiniteLossError(int epoch, int iteration, double seg, double cls)
      : Error("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
              std::to_string(iteration) + " (seg=" + std::to_string(seg) +
              ", cls=" + std::to_string(cls) + ")"),
        epoch(epoch),
        iteration(iteration),
        seg_loss(seg),
        cls_loss(cls) {}

  int epoch;
  int iteration;
  double seg_loss;
  double cls_loss;
};

}  // namespace aepl
