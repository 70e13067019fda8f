#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace siamattn {

// Machine-parsable error codes surfaced by the CLI as `error: <CODE>: <msg>`.
enum class ErrorCode {
  kInvalidArgument,
  kShapeMismatch,
  kConfigUnknownKey,
  kConfigInvalid,
  kCheckpointMismatch,
  kCheckpointMissing,
  kIo,
  kNanLoss,
  kDataset,
};

inline std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "E_INVALID_ARGUMENT";
    case ErrorCode::kShapeMismatch: return "E_SHAPE_MISMATCH";
    case ErrorCode::kConfigUnknownKey: return "E_CONFIG_UNKNOWN_KEY";
    case ErrorCode::kConfigInvalid: return "E_CONFIG_INVALID";
    case ErrorCode::kCheckpointMismatch: return "E_CHECKPOINT_MISMATCH";
    case ErrorCode::kCheckpointMissing: return "E_CHECKPOINT_MISSING";
    case ErrorCode::kIo: return "E_IO";
    case ErrorCode::kNanLoss: return "E_NAN_LOSS";
    case ErrorCode::kDataset: return "E_DATASET";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define SIAMATTN_CHECK(cond, code, msg)                  \
  do {                                                   \
    if (!(cond)) throw ::siamattn::Error((code), (msg)); \
  } while (0)

}  // namespace siamattn
