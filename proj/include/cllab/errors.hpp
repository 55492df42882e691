#pragma once

#include <stdexcept>
#include <string>

namespace cllab {

// Error taxonomy. The CLI maps these onto process exit codes:
// UsageError -> 1, data/format/config errors -> 2, NumericError -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };     // operand conformability
struct NumericError : Error { using Error::Error; };   // non-finite values
struct DomainError : Error { using Error::Error; };    // scalar argument out of range
struct ContractError : Error { using Error::Error; };  // API precondition violated
struct ConfigError : Error { using Error::Error; };    // invalid configuration
struct FormatError : Error { using Error::Error; };    // on-disk format violation
struct IoError : Error { using Error::Error; };        // filesystem failure
struct UsageError : Error { using Error::Error; };     // CLI usage

}  // namespace cllab
