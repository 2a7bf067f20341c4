#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace glacier {

/// Base of every error raised by the library. `kind()` is a stable,
/// machine-readable tag (used by the CLI and server when reporting).
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct IoError : Error {
    explicit IoError(const std::string& what) : Error("io_error", what) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& what) : Error("config_error", what) {}
};

struct ValidationError : Error {
    explicit ValidationError(const std::string& what) : Error("validation_error", what) {}
};

struct MetadataError : Error {
    explicit MetadataError(const std::string& what) : Error("metadata_error", what) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& what) : Error("shape_error", what) {}
};

struct TrainingError : Error {
    explicit TrainingError(const std::string& what) : Error("training_error", what) {}
};

/// Malformed binary container; `offset` is the byte position where decoding failed.
struct FormatError : Error {
    FormatError(const std::string& what, std::size_t offset)
        : Error("format_error", what + " (at byte offset " + std::to_string(offset) + ")"),
          offset(offset) {}
    std::size_t offset;
};

/// Malformed text document (GeoJSON, plan files); `offset` is a byte offset.
struct ParseError : Error {
    ParseError(const std::string& what, std::size_t offset)
        : Error("parse_error", what + " (at byte offset " + std::to_string(offset) + ")"),
          offset(offset) {}
    std::size_t offset;
};

}  // namespace glacier
