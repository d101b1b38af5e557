#pragma once

#include <stdexcept>
#include <string>

namespace dialogen {

// Error categories map one-to-one onto the CLI exit codes (see tools/).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& what, long step_at)
      : std::runtime_error(what), step(step_at) {}
  long step;
};

}  // namespace dialogen
