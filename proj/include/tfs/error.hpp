#pragma once

#include <stdexcept>
#include <string>

namespace tfs {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto process exit codes (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DistributionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class OptimizerError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed input file. Carries the 1-based line number when known.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : DataError(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ModelError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class ObjectiveError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

// Rethrows the in-flight exception with `context` prepended, keeping the
// category that decides the exit code. Call only from inside a catch block.
[[noreturn]] inline void rethrow_with_context(const std::string& context) {
  try {
    throw;
  } catch (const ParseError& e) {
    throw ParseError(context + e.what(), e.line());
  } catch (const ConfigError& e) {
    throw ConfigError(context + e.what());
  } catch (const DataError& e) {
    throw DataError(context + e.what());
  } catch (const NumericError& e) {
    throw NumericError(context + e.what());
  } catch (const CheckpointError& e) {
    throw CheckpointError(context + e.what());
  } catch (const std::exception& e) {
    throw ProtocolError(context + e.what());
  }
}

// 0 success, 1 config error, 2 data error, 3 runtime/numeric error.
inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 1;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return 2;
  return 3;
}

}  // namespace tfs
