#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace alignlab {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dimension/shape violations (matmul mismatch, wrong image resolution, ...).
struct ShapeError : Error {
    using Error::Error;
};

// API preconditions violated by the caller (non-scalar loss, top-k > classes, ...).
struct ContractError : Error {
    using Error::Error;
};

// Token id outside the vocabulary.
struct VocabError : Error {
    using Error::Error;
};

// Bad configuration: unknown preset, double adapter insertion, invalid field.
struct ConfigError : Error {
    using Error::Error;
};

// Freeze-plan pattern problems (pattern matching zero parameters during counting).
struct PlanError : Error {
    using Error::Error;
};

// Malformed or unsupported serialized files (checkpoints, corpus containers).
struct FormatError : Error {
    using Error::Error;
};

// Bad input data (duplicate pair ids, mismatched corpora).
struct DataError : Error {
    using Error::Error;
};

// Synthetic corpus generation cannot satisfy the request.
struct GenerationError : Error {
    using Error::Error;
};

// An embedding row with (near-)zero norm cannot be normalized.
struct DegenerateEmbeddingError : Error {
    using Error::Error;
};

// A parameter that should have stayed frozen changed between checkpoints.
struct ConservationError : Error {
    using Error::Error;
};

// Two checkpoints do not share an architecture and cannot be compared.
struct ComparisonError : Error {
    using Error::Error;
};

// Pearson correlation requested on a zero-variance series.
struct CorrelationUndefinedError : Error {
    using Error::Error;
};

// Non-finite loss during training; carries the diagnostics the abort reports.
struct NumericsError : Error {
    NumericsError(std::int64_t step_, double lr_, double max_abs_grad_, const std::string& what_)
        : Error(what_), step(step_), lr(lr_), max_abs_grad(max_abs_grad_) {}
    std::int64_t step;
    double lr;
    double max_abs_grad;
};

}  // namespace alignlab
