#pragma once

#include <stdexcept>
#include <string>

namespace blindpaint {

// Runtime failure (I/O, corrupt files, numerical divergence).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user-supplied configuration or arguments. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace blindpaint
