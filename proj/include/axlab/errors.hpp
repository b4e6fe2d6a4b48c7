#pragma once

#include <stdexcept>
#include <string>

namespace axlab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension disagreement between operands.
struct DimensionError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

struct InvalidSpanError : Error {
    using Error::Error;
};

// Vector whose norm is too small for a cosine to be defined.
struct DegenerateVectorError : Error {
    using Error::Error;
};

// Model input that violates the config (too long, out-of-vocab, empty).
struct InputError : Error {
    using Error::Error;
};

// A loss or gradient became non-finite.
struct DivergenceError : Error {
    using Error::Error;
};

struct DataError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// A point set with no spread to project.
struct DegenerateVarianceError : Error {
    using Error::Error;
};

// Two reports that cannot be compared.
struct ReportVersionError : Error {
    using Error::Error;
};

}  // namespace axlab
