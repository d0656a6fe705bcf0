#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace consolidator {

/// Extents of two operands do not line up.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A group count does not divide the channel extent it partitions.
class GroupDivisibilityError : public std::invalid_argument {
public:
    GroupDivisibilityError(std::size_t groups, std::size_t extent)
        : std::invalid_argument("group count " + std::to_string(groups) +
                                " does not divide channel extent " + std::to_string(extent)),
          groups_(groups),
          extent_(extent) {}

    std::size_t groups() const noexcept { return groups_; }
    std::size_t extent() const noexcept { return extent_; }

private:
    std::size_t groups_;
    std::size_t extent_;
};

class IndexError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Malformed or truncated CNSB/CNSD byte stream.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Tensor inventory or configuration does not match what an operation expects.
class StructuralError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A task delta was produced against a different backbone.
class FingerprintMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace consolidator
