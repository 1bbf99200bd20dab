#pragma once

#include <stdexcept>
#include <string>

namespace balancelab {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a documented precondition (stale cache, bad label, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameters: dataset spec, split fractions, weights, method params.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed dataset or checkpoint file. The message carries the line number.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t line)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Config text could not be parsed. The message names the offending key path.
class ParseError : public Error {
 public:
  ParseError(const std::string& key, const std::string& what)
      : Error(key.empty() ? what : key + ": " + what), key_(key) {}

  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Unknown balancing method name.
class DispatchError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t epoch, std::size_t batch)
      : Error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
              std::to_string(batch)),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

}  // namespace balancelab
