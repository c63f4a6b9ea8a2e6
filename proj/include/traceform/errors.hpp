#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace traceform {

// Exit-code classes surfaced by the CLI: config 2, data 3, numeric 4.

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed VH document; `offset` is the byte position reported by the JSON reader.
class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : DataError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// Structurally valid document that breaks a domain invariant; `node` is a path like root/children[1].
class ValidationError : public DataError {
 public:
  ValidationError(const std::string& what, std::string node)
      : DataError(what + " at " + node), node_(std::move(node)) {}
  const std::string& node() const noexcept { return node_; }

 private:
  std::string node_;
};

}  // namespace traceform
