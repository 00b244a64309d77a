#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace oseg {

/// Precondition violated by the caller.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A linear system could not be solved (e.g. Cholesky breakdown).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed dataset / model / reservoir file. Carries the byte offset at
/// which decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// One or more classes (or anchors) have no positive samples.
class UntrainableError : public std::runtime_error {
 public:
  explicit UntrainableError(std::vector<int> classes)
      : std::runtime_error(format(classes)), classes_(std::move(classes)) {}

  const std::vector<int>& classes() const noexcept { return classes_; }

 private:
  static std::string format(const std::vector<int>& classes) {
    std::string msg = "untrainable class(es) without positives:";
    for (int c : classes) msg += " " + std::to_string(c);
    return msg;
  }
  std::vector<int> classes_;
};

}  // namespace oseg
