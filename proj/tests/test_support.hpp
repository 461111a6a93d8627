#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <utility>

#include "fakd/error.hpp"

// Matches a fakd::Error by its stable code slug.
class ErrorCodeIs : public Catch::Matchers::MatcherGenericBase {
 public:
  explicit ErrorCodeIs(std::string code) : code_(std::move(code)) {}

  bool match(const fakd::Error& e) const { return e.code() == code_; }

  std::string describe() const override { return "has error code '" + code_ + "'"; }

 private:
  std::string code_;
};
