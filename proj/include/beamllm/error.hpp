#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace beamllm {

enum class ErrorKind {
  dimension,
  index,
  contract,
  config,
  domain,
  geometry,
  parse,
  validation,
  length,
  load,
  numeric,
  io,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Single exception type for the library; `kind()` identifies the failure class
/// and `what()` carries a one-line message.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace beamllm
