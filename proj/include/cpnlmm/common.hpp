#pragma once

#include <stdexcept>
#include <string>

namespace cpnlmm {

// Error categories map onto CLI exit codes: config -> 1, data -> 2, numerical -> 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Zero-variance or single-draw inputs make a statistic meaningless; callers
// that can degrade gracefully catch this and flag the cell instead.
struct DegenerateDraws : NumericalError {
    explicit DegenerateDraws(const std::string& msg) : NumericalError(msg) {}
};

}  // namespace cpnlmm
