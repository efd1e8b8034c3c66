#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kaspe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
 public:
  using Error::Error;
};

class InvalidConfig : public Error {
 public:
  using Error::Error;
};

/// Raised when a computation produced non-finite values or a matrix was
/// numerically singular. Subclasses carry extra context.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

class LayerFailure : public NumericalFailure {
 public:
  LayerFailure(std::size_t layer, const std::string& what)
      : NumericalFailure(what + " (layer " + std::to_string(layer) + ")"),
        layer_(layer) {}
  std::size_t layer() const noexcept { return layer_; }

 private:
  std::size_t layer_;
};

class DivergenceError : public NumericalFailure {
 public:
  explicit DivergenceError(double time)
      : NumericalFailure("ODE state became non-finite at t=" +
                         std::to_string(time)),
        time_(time) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

class SingularDesign : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class DegeneratePosterior : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class DegenerateSample : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class CoverageError : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class UnattainableTarget : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class InitializationFailure : public NumericalFailure {
 public:
  using NumericalFailure::NumericalFailure;
};

class AxisMismatch : public Error {
 public:
  using Error::Error;
};

/// Configuration error; `path()` is a JSON pointer to the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& what)
      : Error(path.empty() ? what : path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// An upstream artifact was produced under a different configuration.
class StalenessError : public Error {
 public:
  using Error::Error;
};

}  // namespace kaspe
