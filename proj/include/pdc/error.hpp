#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pdc {

// Base of every error the library raises: invalid inputs, violated
// invariants, numerical failures.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A malformed line in a JSONL input. `line` is 1-based.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace pdc
