#pragma once

#include <stdexcept>
#include <string>

namespace pflow {

/// Bad input: a precondition, a config field or a shape did not check out.
class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A computation produced a non-finite value or otherwise broke down.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed, truncated or mismatched binary container.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The requested operation needs a closed-form oracle the model does not have.
class NoOracleError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {

inline void require(bool ok, const std::string& what)
{
    if (!ok) throw ValidationError(what);
}

}  // namespace detail
}  // namespace pflow
