#pragma once

#include <stdexcept>
#include <string>

namespace capseq {

// Base of every error the library throws. Callers that only care about
// "something in capseq failed" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes or extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition on caller-supplied values was violated.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A file or byte stream did not match its documented format.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace capseq
