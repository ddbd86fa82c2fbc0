#pragma once

#include <stdexcept>
#include <string>

namespace refgen {

enum class ErrorKind { Validation, Io, Forge, Training, Config };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error(ErrorKind::Validation, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

struct ForgeError : Error {
  explicit ForgeError(const std::string& what) : Error(ErrorKind::Forge, what) {}
};

struct TrainingError : Error {
  explicit TrainingError(const std::string& what) : Error(ErrorKind::Training, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Config, what) {}
};

inline const char* kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Io: return "io";
    case ErrorKind::Forge: return "forge";
    case ErrorKind::Training: return "training";
    case ErrorKind::Config: return "config";
  }
  return "unknown";
}

#define REFGEN_CHECK(cond, msg)                      \
  do {                                               \
    if (!(cond)) throw ::refgen::ValidationError(msg); \
  } while (0)

}  // namespace refgen
