#pragma once

#include <stdexcept>
#include <string>

namespace textmesh {

// Common base for all engine errors so callers can catch one type at the
// CLI/binding boundary while tests can still assert on subclasses.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace textmesh
