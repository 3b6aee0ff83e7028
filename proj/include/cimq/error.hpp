#pragma once

#include <stdexcept>
#include <string>

namespace cimq {

/// Raised when inputs or configuration violate a documented contract.
/// The CLI maps this to exit code 2.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& what) : std::invalid_argument(what) {}
};

/// Raised for failures that only show up while running (I/O, numerics).
class RuntimeError : public std::runtime_error {
public:
    explicit RuntimeError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg)
{
    if (!cond) throw ValidationError(msg);
}

}  // namespace cimq
