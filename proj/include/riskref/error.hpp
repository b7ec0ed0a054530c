#pragma once

#include <stdexcept>
#include <string>

namespace riskref {

// Malformed or inconsistent configuration; carries the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

// A required input file or checkpoint is absent.
class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(std::string path)
      : std::runtime_error("missing artifact: " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Non-finite values surfaced during training or evaluation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace riskref
