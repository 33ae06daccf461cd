#pragma once

#include <stdexcept>
#include <string>

namespace avp {

// Base for all named failure modes so callers can catch the library as a whole.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace avp
