#pragma once

#include <stdexcept>
#include <string>

namespace varinf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

/// A primitive produced a NaN or an infinity while recording a computation.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(std::string primitive)
      : Error("non-finite value produced by primitive '" + primitive + "'"),
        primitive_(std::move(primitive)) {}
  const std::string& primitive() const noexcept { return primitive_; }
  const char* kind() const noexcept override { return "non_finite"; }

 private:
  std::string primitive_;
};

/// Cholesky of a (capacitance or dense) matrix failed.
class FactorizationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "factorization"; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "shape"; }
};

/// Sampling mode not supported by the family.
class ModeError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "mode_mismatch"; }
};

/// Dropout enumeration requested beyond the guard limit.
class GuardError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "guard_exceeded"; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "config"; }
};

/// Training stopped: non-finite ELBO or exploding gradient.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step)
      : Error(what + " at step " + std::to_string(step)), step_(step) {}
  long step() const noexcept { return step_; }
  const char* kind() const noexcept override { return "training_divergence"; }

 private:
  long step_;
};

}  // namespace varinf
