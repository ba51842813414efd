#pragma once

#include <stdexcept>
#include <string>

namespace testdrive {

/// Broad failure categories; the CLI and HTTP layers map these to exit codes
/// and status codes.
enum class Errc {
  invalid_argument,  // caller passed something outside the contract
  data,              // input files are missing, malformed or inconsistent
  io,                // filesystem failure while writing
  not_found,         // unknown session, threshold or query
  conflict,          // answer already recorded, query not outstanding
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace testdrive
