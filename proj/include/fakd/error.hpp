#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fakd {

// Every failure raised by the library carries a stable machine-readable code
// ("shape-mismatch", "invalid-temperature", ...) plus a free-form detail
// string. Tests and the CLI match on the code, not the prose.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& detail)
      : std::runtime_error(code + ": " + detail), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

[[noreturn]] inline void fail(std::string code, const std::string& detail) {
  throw Error(std::move(code), detail);
}

inline void require(bool cond, const char* code, const std::string& detail) {
  if (!cond) fail(code, detail);
}

}  // namespace fakd
