#pragma once

#include <stdexcept>
#include <string>

namespace msp {

// Error taxonomy shared by the library and the CLI. Exit codes: 2 validation,
// 3 numeric failure, 4 I/O.
enum class Errc {
  validation,
  shape_mismatch,
  numeric,
  divergence,
  infeasible,
  io,
  bad_magic,
  truncated,
  length_mismatch,
  bad_format,
  invalid_code,
  unknown_level,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}

  Errc code() const { return code_; }

  int exit_code() const {
    switch (code_) {
      case Errc::validation:
      case Errc::shape_mismatch:
        return 2;
      case Errc::numeric:
      case Errc::divergence:
      case Errc::infeasible:
        return 3;
      default:
        return 4;
    }
  }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Errc code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace msp
