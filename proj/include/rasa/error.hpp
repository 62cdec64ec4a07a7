#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rasa {

/// Broad failure classes. Each maps onto a process exit code in the CLI.
enum class ErrorKind {
  config,    ///< invalid configuration or out-of-range hyperparameter
  data,      ///< corpus, vocabulary, file-format or protocol problem
  numeric,   ///< NaN/Inf or a numeric guard tripped
  contract,  ///< precondition violated by the caller (shapes, lifecycle)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

struct DataError : Error {
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

struct VocabError : DataError {
  using DataError::DataError;
};

struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error(ErrorKind::contract, what) {}
};

struct DimensionError : ContractError {
  using ContractError::ContractError;
};

struct LifecycleError : ContractError {
  using ContractError::ContractError;
};

[[nodiscard]] inline std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::config: return "config";
    case ErrorKind::data: return "data";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::contract: return "contract";
  }
  return "unknown";
}

/// Exit codes used by the command-line tool.
[[nodiscard]] inline int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numeric: return 4;
    case ErrorKind::contract: return 1;
  }
  return 1;
}

template <class E = ContractError>
inline void require(bool condition, const std::string& message) {
  if (!condition) {
    throw E(message);
  }
}

}  // namespace rasa
