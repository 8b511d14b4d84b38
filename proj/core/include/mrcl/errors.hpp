#pragma once

#include <stdexcept>
#include <string>

namespace mrcl {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value, unknown key, or violated protocol rule.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor, patch grid, or mask plan dimensions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite activations or losses, or an undefined normalization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Missing or corrupt dataset files.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint version mismatch, truncation, or corruption.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures outside of dataset ingestion.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mrcl
