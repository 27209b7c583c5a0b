#pragma once

#include <stdexcept>
#include <string>

namespace trajgpt {

// Caller broke a precondition (shape mismatch, out-of-range id, bad config).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Unreadable, unwritable or malformed file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite value.
class NumericFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw ContractViolation(message);
    }
}

}  // namespace trajgpt
