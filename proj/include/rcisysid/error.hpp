#pragma once

#include <stdexcept>
#include <string>

namespace rcisysid {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input: bad dimensions, bad config, unreadable files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A numerical procedure diverged or produced non-finite values.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// An optimization stage that must be feasible turned out not to be.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace rcisysid
