#pragma once

#include <stdexcept>
#include <string>

namespace actadd {

// Runtime failure: I/O, corrupted files, non-finite activations.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller supplied something outside the documented contract. Maps to CLI exit
// code 2 and HTTP 400.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}
  explicit ValidationError(const std::string& message) : Error(message) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace actadd
