#pragma once

#include <stdexcept>
#include <string>

namespace scalenet {

// Root of every error the library raises. Subclasses only refine the category
// so callers can report a phase-tagged line without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument: out-of-range label, bad alpha, unknown block, ...
class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Output would be smaller than the minimal 2x2 image.
class DegenerateSizeError : public Error {
 public:
  using Error::Error;
};

// Standardization statistics cannot be formed (zero variance).
class StatsError : public Error {
 public:
  using Error::Error;
};

// Non-finite values or out-of-domain log arguments.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Tensor or array shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Checkpoint cannot be transferred onto the requested architecture.
class TransferError : public Error {
 public:
  using Error::Error;
};

// Checkpoint is missing layers or carries unexpected ones.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// Backbone cannot be built for the requested input size.
class ConstructionError : public Error {
 public:
  using Error::Error;
};

// Dataset on disk is malformed, truncated or empty.
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Configuration file or flag combination is invalid.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace scalenet
