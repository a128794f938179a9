#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sauron {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by an op, a loss or an optimizer step.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Illegal structural edit of a network (emptying a layer, pruning the classifier, ...).
class StructureError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_mismatch(const std::string& op, const std::string& lhs_name,
                                        const std::vector<std::size_t>& lhs,
                                        const std::string& rhs_name,
                                        const std::vector<std::size_t>& rhs,
                                        const std::string& why = {}) {
  std::ostringstream os;
  os << op << ": shape mismatch between " << lhs_name << ' ' << shape_str(lhs) << " and "
     << rhs_name << ' ' << shape_str(rhs);
  if (!why.empty()) os << " (" << why << ')';
  throw ShapeError(os.str());
}

}  // namespace detail
}  // namespace sauron
