#pragma once

#include <stdexcept>
#include <string>

namespace petapter {

// Error taxonomy. The CLI maps these onto exit codes: usage problems are
// caught before any of these are thrown, data/file problems map to 2,
// numeric failures to 3.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape disagreement between tensors (names both shapes in the message).
struct DimensionError : Error {
    using Error::Error;
};

// A caller broke an API precondition (non-scalar backward, missing grad, ...).
struct ContractError : Error {
    using Error::Error;
};

// Pattern template parsing/validation failures.
struct TemplateError : Error {
    using Error::Error;
};

// Verbalizer / PVP validation failures (injectivity, mask-count mismatch).
struct PvpError : Error {
    using Error::Error;
};

// Vocabulary construction or lookup failures.
struct VocabError : Error {
    using Error::Error;
};

// Compiled instance cannot fit the model's maximum input length.
struct CapacityError : Error {
    using Error::Error;
};

// Dataset ingestion problems (malformed lines, missing label keys, ...).
struct DataError : Error {
    using Error::Error;
};

// Checkpoint serialization/deserialization problems.
struct CheckpointError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

} // namespace petapter
