#pragma once

#include <stdexcept>
#include <string>

namespace manet {

/// Root of every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad fold index, non-divisible class counts, bad flags.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Broken caller contract: shape mismatch, empty input lists.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Episode sampling could not be satisfied for a class.
class SamplingError : public Error {
 public:
  using Error::Error;
};

/// A support mask with no foreground at feature resolution (and no fallback).
class DegenerateSupportError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file, or unsupported version.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace manet
