#pragma once

#include <stdexcept>
#include <string>

namespace afl {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UnboundInputError : public Error {
 public:
  explicit UnboundInputError(const std::string& input)
      : Error("unbound graph input '" + input + "'"), input_(input) {}
  const std::string& input() const { return input_; }

 private:
  std::string input_;
};

// NaN or Inf produced by a node; carries the node name.
class NumericError : public Error {
 public:
  NumericError(const std::string& node, const std::string& what)
      : Error(what + " at node '" + node + "'"), node_(node) {}
  const std::string& node() const { return node_; }

 private:
  std::string node_;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Request validation failure; `field` names the offending field.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

}  // namespace afl
