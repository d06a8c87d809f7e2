#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace protofed {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller handed us malformed data (shape mismatch, out-of-range label, ...).
struct InvalidInput : Error {
    using Error::Error;
};

// A config value failed validation; carries the offending key.
struct ValidationError : InvalidInput {
    ValidationError(std::string key, const std::string& what)
        : InvalidInput("config key '" + key + "': " + what), field(std::move(key)) {}
    std::string field;
};

// A file had unparseable contents (bad magic, truncation, ...).
struct ParseError : Error {
    using Error::Error;
};

// Filesystem-level failure (missing file, unwritable directory).
struct IoError : Error {
    using Error::Error;
};

// Federated round sequencing violated (round counter past T, empty shard).
struct ProtocolError : Error {
    using Error::Error;
};

}  // namespace protofed
