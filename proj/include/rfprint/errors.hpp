#pragma once

#include <stdexcept>
#include <string>

namespace rfprint {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Receiver could not find the known training symbol in a frame.
class EstimationFailure : public Error {
 public:
  using Error::Error;
};

/// A filter response falls below the compensation floor on a used bin.
class IllConditionedFilter : public Error {
 public:
  using Error::Error;
};

class CorruptFile : public Error {
 public:
  using Error::Error;
};

class VersionMismatch : public Error {
 public:
  VersionMismatch(unsigned found, unsigned expected)
      : Error("format version mismatch: file has version " + std::to_string(found) +
              ", reader expects version " + std::to_string(expected)),
        found_(found),
        expected_(expected) {}

  unsigned found() const noexcept { return found_; }
  unsigned expected() const noexcept { return expected_; }

 private:
  unsigned found_;
  unsigned expected_;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidInput(what);
}

}  // namespace detail
}  // namespace rfprint
