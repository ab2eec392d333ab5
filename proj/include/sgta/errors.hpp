#pragma once

#include <stdexcept>
#include <string>

namespace sgta {

// Typed errors so callers can branch on the failure class instead of
// parsing message strings.

struct NonPositiveDepth : std::runtime_error {
    explicit NonPositiveDepth(const std::string& msg) : std::runtime_error(msg) {}
};

struct SingularAffine : std::runtime_error {
    explicit SingularAffine(const std::string& msg) : std::runtime_error(msg) {}
};

struct LengthMismatch : std::runtime_error {
    explicit LengthMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

struct DegenerateConfiguration : std::runtime_error {
    explicit DegenerateConfiguration(const std::string& msg) : std::runtime_error(msg) {}
};

struct NoModelFound : std::runtime_error {
    explicit NoModelFound(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalFailure : std::runtime_error {
    explicit NumericalFailure(const std::string& msg) : std::runtime_error(msg) {}
};

struct InsufficientPoints : std::runtime_error {
    explicit InsufficientPoints(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

struct SizeMismatch : std::runtime_error {
    explicit SizeMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

struct IdMismatch : std::runtime_error {
    explicit IdMismatch(const std::string& msg) : std::runtime_error(msg) {}
};

struct EmptyInput : std::runtime_error {
    explicit EmptyInput(const std::string& msg) : std::runtime_error(msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ChecksumError : std::runtime_error {
    explicit ChecksumError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace sgta
