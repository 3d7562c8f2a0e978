// Exception hierarchy shared by every iidnet module.
#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace iidnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch, singular matrix, malformed call.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Input is valid by type but cannot be processed (all-black image,
/// singleton batch statistics, all-zero ground truth).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public Error {
 public:
  using Error::Error;
};

class VersionMismatchError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values appeared during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Configuration failed validation. Carries every problem found, not just
/// the first one.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : Error(join(problems)), problems_(std::move(problems)) {}

  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& problems) {
    std::string out = "invalid configuration:";
    for (const auto& p : problems) {
      out += "\n  - ";
      out += p;
    }
    return out;
  }

  std::vector<std::string> problems_;
};

}  // namespace iidnet
