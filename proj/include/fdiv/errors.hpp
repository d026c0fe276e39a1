#pragma once

#include <stdexcept>
#include <string>

namespace fdv {

/// Argument outside the domain of f, f', f* or (f*)'.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// (f*)' left the representable range; callers should shrink the step.
class OverflowError : public std::overflow_error {
 public:
  using std::overflow_error::overflow_error;
};

/// An improved policy did not sum to one before renormalization.
class NormalizationError : public std::runtime_error {
 public:
  NormalizationError(const std::string& what, double residual)
      : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fdv
