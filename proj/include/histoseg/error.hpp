#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace histoseg {

enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  OutOfBounds,
  FileNotFound,
  MalformedPng,
  UnsupportedBitDepth,
  Io,
  DegenerateInput,
  RankDeficient,
  StaleCache,
  Divergence,
  Parse,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::ShapeMismatch: return "shape_mismatch";
    case ErrorKind::OutOfBounds: return "out_of_bounds";
    case ErrorKind::FileNotFound: return "file_not_found";
    case ErrorKind::MalformedPng: return "malformed_png";
    case ErrorKind::UnsupportedBitDepth: return "unsupported_bit_depth";
    case ErrorKind::Io: return "io";
    case ErrorKind::DegenerateInput: return "degenerate_input";
    case ErrorKind::RankDeficient: return "rank_deficient";
    case ErrorKind::StaleCache: return "stale_cache";
    case ErrorKind::Divergence: return "divergence";
    case ErrorKind::Parse: return "parse";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so callers (and the CLI's
/// machine-readable error line) can branch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

/// Re-raises `err` with `context: ` prepended, keeping its kind.
[[noreturn]] inline void rethrow_with_context(const Error& err, std::string_view context) {
  throw Error(err.kind(), std::string(context) + ": " + err.what());
}

}  // namespace histoseg
