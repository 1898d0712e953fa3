#pragma once

#include <stdexcept>
#include <string>

namespace arsim {

/// A documented precondition was broken by the caller (bad shape, bad argument,
/// invalid state transition).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A computation produced a non-finite value.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace arsim

namespace arsim {

/// Failure reading or writing an on-disk artifact (dataset, checkpoint).
class FileError : public std::runtime_error {
public:
    enum class Kind { Io, Format, Version, Truncated, ShapeMismatch };

    FileError(Kind kind, const std::string& path, const std::string& detail)
        : std::runtime_error(path + ": " + detail), kind_(kind), path_(path) {}

    Kind kind() const { return kind_; }
    const std::string& path() const { return path_; }

private:
    Kind kind_;
    std::string path_;
};

}  // namespace arsim
