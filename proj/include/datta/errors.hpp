#pragma once

#include <stdexcept>
#include <string>

namespace datta {

/// Tensor extents or layer channel counts do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An op produced (or was handed) NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the tape: non-scalar loss, foreign variable, etc.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Binary record files (weights, stats, datasets).
class FormatError : public std::runtime_error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, DimensionMismatch, MissingTensor, LayerMismatch, Io };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Invalid experiment configuration; `path` names the offending field.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Stream construction preconditions (budgets, batch sizes, unknown corruption).
class StreamError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Adaptation aborted because the loss became non-finite. Parameters are left as before the step.
class NumericAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed CSV input; the message names the file and line.
class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace datta
