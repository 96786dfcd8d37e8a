#pragma once

#include <stdexcept>
#include <string>

namespace dos {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value or unknown key. `path` is a JSON pointer when known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg, std::string path = {})
      : Error(path.empty() ? msg : path + ": " + msg), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed input file. `line` is 1-based, 0 when not applicable.
class ParseError : public Error {
 public:
  ParseError(const std::string& file, std::size_t line, const std::string& msg)
      : Error(file + (line ? ":" + std::to_string(line) : std::string{}) + ": " + msg),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Non-finite values or violated numeric preconditions.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Geometric or sampling infeasibility (placement, cropping, masking).
class GeometryError : public Error {
 public:
  using Error::Error;
};

}  // namespace dos
