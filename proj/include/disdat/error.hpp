#pragma once

#include <stdexcept>
#include <string>

namespace disdat {

// Base for all library errors. Subclasses map to CLI exit codes:
// ConfigError/ParseError -> 1, TrainingAbort -> 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& msg) : Error(msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

class TrainingAbort : public Error {
 public:
  explicit TrainingAbort(const std::string& msg) : Error(msg) {}
};

}  // namespace disdat
