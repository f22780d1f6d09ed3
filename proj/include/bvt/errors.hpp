#pragma once

#include <stdexcept>
#include <string>

namespace bvt {

// Shape or broadcast incompatibility. Messages name the offending shapes.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Misuse of the recording tape: non-scalar loss, detached tensor, stale epoch,
// repeated backward.
struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

// NaN/inf or zero denominators that must not be masked.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed binary or text input (bad magic, truncated payload, bad header).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Configuration or precondition violation detected before any work is done.
struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

}  // namespace bvt
