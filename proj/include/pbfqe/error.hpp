#pragma once

#include <stdexcept>
#include <string>

namespace pbfqe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes of two objects disagree (MDP vs policy, network input, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented invariant (simplex, bounds, anchor).
class InvariantError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside its admissible range (empty dataset, bad step).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// p is not absolutely continuous with respect to q at some atom.
class SupportError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// An experiment configuration failed validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace pbfqe
