#pragma once

#include <stdexcept>
#include <string>

namespace sidae {

// Shapes do not conform (matmul inner dims, elementwise operands, kernel vs. input).
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// A hyperparameter is outside its admissible range (w, stride, output_padding, fraction...).
class ParameterError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// API misuse: backward on a non-scalar, a missing gradient, a degenerate batch.
class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

class NumericalError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Malformed on-disk data (IDX, CIFAR/STL binaries, checkpoints, results files).
class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Two well-formed inputs disagree (image vs. label counts, results schemas).
class ConsistencyError : public FormatError {
   public:
    using FormatError::FormatError;
};

// A required input file or directory does not exist.
class MissingDataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

}  // namespace sidae
