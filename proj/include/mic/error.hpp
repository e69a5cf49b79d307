#pragma once

#include <stdexcept>
#include <string>

namespace mic {

// Invalid hyperparameter, malformed config file, or an unsatisfiable request
// such as a sampled vocabulary smaller than the set of classes it must keep.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A vector that must be normalized has zero (or non-finite) norm.
class DegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A training loop produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A required artifact (checkpoint, world file) is missing or unreadable.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mic
