#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace warden {

enum class ErrorCode {
  Validation,
  Storage,
  Range,
  Schema,
  Semantic,
  UnknownTemplate,
  Binding,
  UnknownNamespace,
  NotRuntimeRule,
  AlreadyDeployed,
  UnknownPolicy,
  Enactment,
  Duplicate,
  DuplicateEntry,
  DuplicateNode,
  Coverage,
  ScopeMismatch,
  InvalidIp,
  NotBlocked,
  NotFound,
  Parse,
  DeliveryExhausted,
  PortInUse,
  StackUnreachable,
  Unauthorized,
  InvalidTransition,
};

std::string_view to_string(ErrorCode code);
std::optional<ErrorCode> parse_error_code(std::string_view text);

// Location-addressed problem found while validating a document. `path` is a
// JSON-pointer style location ("/rule/or/0/window/threshold").
struct FieldError {
  std::string path;
  std::string message;

  bool operator==(const FieldError&) const = default;
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message, std::vector<FieldError> details = {});

  ErrorCode code() const noexcept { return code_; }
  const std::vector<FieldError>& details() const noexcept { return details_; }

 private:
  ErrorCode code_;
  std::vector<FieldError> details_;
};

// Throws Error{code} whose message summarizes the first detail.
[[noreturn]] void raise(ErrorCode code, const std::string& what, std::vector<FieldError> details);

// HTTP status used by the gateway for each error code.
int http_status(ErrorCode code);

}  // namespace warden
