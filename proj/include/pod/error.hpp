#pragma once

#include <stdexcept>
#include <string>

namespace pod {

enum class ErrorKind {
  kDegenerateRotation,
  kInvalidRepresentation,
  kInvalidArgument,
  kUnknownKind,
  kClippedRender,
  kNoPrediction,
  kNonFiniteLoss,
  kShapeMismatch,
  kIo,
  kStage,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDegenerateRotation: return "degenerate-rotation";
    case ErrorKind::kInvalidRepresentation: return "invalid-representation";
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kUnknownKind: return "unknown-kind";
    case ErrorKind::kClippedRender: return "clipped-render";
    case ErrorKind::kNoPrediction: return "no-prediction";
    case ErrorKind::kNonFiniteLoss: return "non-finite-loss";
    case ErrorKind::kShapeMismatch: return "shape-mismatch";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kStage: return "stage";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

}  // namespace pod
