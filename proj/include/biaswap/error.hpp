#pragma once

#include <stdexcept>
#include <string>

namespace biaswap {

// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument or precondition violation.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated or tampered file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Numerical failure during training (NaN / inf loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

// Operation not supported for the given architecture.
class Unsupported : public Error {
 public:
  using Error::Error;
};

// A pipeline stage was asked to run before its upstream stages.
class MissingArtifact : public Error {
 public:
  MissingArtifact(const std::string& required_stage, const std::string& what)
      : Error(what), required_stage_(required_stage) {}
  const std::string& required_stage() const noexcept { return required_stage_; }

 private:
  std::string required_stage_;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvalidArgument(msg);
}

}  // namespace biaswap
