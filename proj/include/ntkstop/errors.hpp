#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ntkstop {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two input points closer than the duplicate tolerance.
class DuplicatePoints : public Error {
 public:
  using Error::Error;
};

/// Gram matrix with an eigenvalue below the PSD slack.
class NotPSD : public Error {
 public:
  using Error::Error;
};

/// Fixed-point function does not change sign on the search bracket.
class BracketFailure : public Error {
 public:
  using Error::Error;
};

class OddWidth : public Error {
 public:
  using Error::Error;
};

/// eta * lambda_max >= 1, so the kernel iteration does not contract.
class StepSizeTooLarge : public Error {
 public:
  using Error::Error;
};

class SingularGram : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Training produced a NaN or infinite residual.
class NonFiniteResidual : public Error {
 public:
  explicit NonFiniteResidual(std::int64_t step)
      : Error("non-finite residual at step " + std::to_string(step)), step_(step) {}

  std::int64_t step() const noexcept { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace ntkstop
