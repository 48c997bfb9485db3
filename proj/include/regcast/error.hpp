#pragma once

#include <stdexcept>
#include <string>

namespace regcast {

/// Broad classification used by the CLI to pick an exit code.
enum class ErrorKind {
  kUser,      ///< bad arguments, missing inputs, invalid files (exit 1)
  kInternal,  ///< numerical failure or broken invariant (exit 2)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error(ErrorKind::kUser, what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kUser, what) {}
};

class MissingTimestampError : public Error {
 public:
  explicit MissingTimestampError(const std::string& what) : Error(ErrorKind::kUser, what) {}
};

class NotFoundError : public Error {
 public:
  explicit NotFoundError(const std::string& what) : Error(ErrorKind::kUser, what) {}
};

class CorruptDataError : public Error {
 public:
  explicit CorruptDataError(const std::string& what) : Error(ErrorKind::kUser, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::kInternal, what) {}
};

/// An upstream error re-raised with the pipeline stage that produced it.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const Error& cause)
      : Error(cause.kind(), "[" + stage + "] " + cause.what()), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

template <typename Fn>
decltype(auto) with_stage(const std::string& stage, Fn&& fn) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  }
}

}  // namespace regcast
