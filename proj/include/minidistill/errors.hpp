#pragma once

#include <stdexcept>
#include <string>

namespace minidistill {

// Tensor dimensions disagree with what an operation requires.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A softmax row has no unmasked entry.
class DegenerateMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// KL divergence with p > 0 where q == 0.
class SupportError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A row expected to be a probability distribution does not sum to one.
class NormalizationError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN/Inf in values, gradients or a loss.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the tape: non-scalar loss, repeated backward, ...
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid model configuration, distillation spec or plan.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unreadable/corrupt files and bad paths.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace minidistill
