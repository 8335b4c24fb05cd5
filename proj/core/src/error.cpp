#include "warden/error.hpp"

namespace warden {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Validation: return "ValidationError";
    case ErrorCode::Storage: return "StorageError";
    case ErrorCode::Range: return "RangeError";
    case ErrorCode::Schema: return "SchemaError";
    case ErrorCode::Semantic: return "SemanticError";
    case ErrorCode::UnknownTemplate: return "UnknownTemplate";
    case ErrorCode::Binding: return "BindingError";
    case ErrorCode::UnknownNamespace: return "UnknownNamespace";
    case ErrorCode::NotRuntimeRule: return "NotRuntimeRule";
    case ErrorCode::AlreadyDeployed: return "AlreadyDeployed";
    case ErrorCode::UnknownPolicy: return "UnknownPolicy";
    case ErrorCode::Enactment: return "EnactmentError";
    case ErrorCode::Duplicate: return "Duplicate";
    case ErrorCode::DuplicateEntry: return "DuplicateEntry";
    case ErrorCode::DuplicateNode: return "DuplicateNode";
    case ErrorCode::Coverage: return "CoverageError";
    case ErrorCode::ScopeMismatch: return "ScopeMismatch";
    case ErrorCode::InvalidIp: return "InvalidIp";
    case ErrorCode::NotBlocked: return "NotBlocked";
    case ErrorCode::NotFound: return "NotFound";
    case ErrorCode::Parse: return "ParseError";
    case ErrorCode::DeliveryExhausted: return "DeliveryExhausted";
    case ErrorCode::PortInUse: return "PortInUse";
    case ErrorCode::StackUnreachable: return "StackUnreachable";
    case ErrorCode::Unauthorized: return "Unauthorized";
    case ErrorCode::InvalidTransition: return "InvalidTransition";
  }
  return "Error";
}

std::optional<ErrorCode> parse_error_code(std::string_view text) {
  for (int i = 0; i <= static_cast<int>(ErrorCode::InvalidTransition); ++i) {
    if (to_string(static_cast<ErrorCode>(i)) == text) return static_cast<ErrorCode>(i);
  }
  return std::nullopt;
}

Error::Error(ErrorCode code, std::string message, std::vector<FieldError> details)
    : std::runtime_error(std::move(message)), code_(code), details_(std::move(details)) {}

void raise(ErrorCode code, const std::string& what, std::vector<FieldError> details) {
  std::string message = what;
  if (!details.empty()) message += ": " + details.front().path + ": " + details.front().message;
  if (details.size() > 1) message += " (+" + std::to_string(details.size() - 1) + " more)";
  throw Error(code, message, std::move(details));
}

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::Validation:
    case ErrorCode::Schema:
    case ErrorCode::Semantic:
    case ErrorCode::Binding:
    case ErrorCode::UnknownNamespace:
    case ErrorCode::NotRuntimeRule:
    case ErrorCode::InvalidIp:
    case ErrorCode::Parse:
    case ErrorCode::ScopeMismatch:
    case ErrorCode::Coverage:
      return 422;
    case ErrorCode::Range:
      return 400;
    case ErrorCode::Duplicate:
    case ErrorCode::DuplicateEntry:
    case ErrorCode::DuplicateNode:
    case ErrorCode::AlreadyDeployed:
    case ErrorCode::InvalidTransition:
      return 409;
    case ErrorCode::UnknownTemplate:
    case ErrorCode::UnknownPolicy:
    case ErrorCode::NotBlocked:
    case ErrorCode::NotFound:
      return 404;
    case ErrorCode::Unauthorized:
      return 401;
    case ErrorCode::StackUnreachable:
    case ErrorCode::DeliveryExhausted:
      return 503;
    case ErrorCode::Storage:
    case ErrorCode::Enactment:
    case ErrorCode::PortInUse:
      return 500;
  }
  return 500;
}

}  // namespace warden
