#pragma once

#include <stdexcept>
#include <string>

namespace sfl {

// Caller violated an operation's preconditions (shapes, dtypes, arguments).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A model graph failed shape closure or another build-time check.
class BuildError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidSplit : public BuildError {
 public:
  using BuildError::BuildError;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input data: bad class ids, missing masks, unreadable images.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AggregationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Peer sent something that violates the relay protocol or the wire format.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The carrier failed: refused, reset, or closed connections and queues.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sfl
