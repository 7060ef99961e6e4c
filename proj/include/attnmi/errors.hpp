#pragma once

#include <stdexcept>
#include <string>

namespace attnmi {

// Error taxonomy used across the library. Everything derives from
// std::runtime_error so callers can catch broadly at the CLI boundary.

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct InvalidInputError : std::runtime_error {
  explicit InvalidInputError(const std::string& msg)
      : std::runtime_error("invalid input: " + msg) {}
};

struct IngestError : std::runtime_error {
  explicit IngestError(const std::string& msg) : std::runtime_error("ingest error: " + msg) {}
};

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& msg) : std::runtime_error("training error: " + msg) {}
};

struct AnalysisError : std::runtime_error {
  explicit AnalysisError(const std::string& msg) : std::runtime_error("analysis error: " + msg) {}
};

}  // namespace attnmi
