#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace diffdenoise {

/// Invalid parameter combination in a NoiseSpec, model config or experiment config.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Two images (or tensors) that must agree in shape do not.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Persisted file is malformed: bad magic, unsupported version, truncated payload.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training diverged (non-finite loss) or a network produced non-finite output.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A blind-spot layer stack whose receptive field would reach the masked square.
class ConstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Statistic is undefined for the given input (e.g. autocorrelation of a constant field).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage failed; carries the stage name so the CLI can report it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage '" + stage + "': " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace diffdenoise
