#pragma once

#include <stdexcept>
#include <string>

namespace dmsn {

// Error taxonomy used across the library. The CLI maps ConfigError to exit
// code 2 and NumericError to exit code 3.

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct IngestionError : std::runtime_error {
    explicit IngestionError(const std::string& msg) : std::runtime_error("ingestion error: " + msg) {}
};

struct EmptySequenceError : std::runtime_error {
    explicit EmptySequenceError(const std::string& msg) : std::runtime_error("empty sequence: " + msg) {}
};

struct SingularityError : std::runtime_error {
    explicit SingularityError(const std::string& msg) : std::runtime_error("singularity: " + msg) {}
};

struct UndefinedAucError : std::runtime_error {
    explicit UndefinedAucError(const std::string& msg) : std::runtime_error("undefined AUC: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric failure: " + msg) {}
};

}  // namespace dmsn
