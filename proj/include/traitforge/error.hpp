#pragma once

#include <stdexcept>
#include <string>

namespace traitforge {

// Values double as CLI exit codes.
enum class ErrorKind {
  usage = 1,
  data = 2,
  io = 3,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& what) { return Error(ErrorKind::usage, what); }
inline Error data_error(const std::string& what) { return Error(ErrorKind::data, what); }
inline Error io_error(const std::string& what) { return Error(ErrorKind::io, what); }

}  // namespace traitforge
