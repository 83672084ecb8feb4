#pragma once

#include <stdexcept>
#include <string>

namespace dynloc {

// Error categories map 1:1 to CLI exit codes; see tools/main.cpp.
class InvalidArgument : public std::invalid_argument {
public:
  explicit InvalidArgument(const std::string& msg) : std::invalid_argument(msg) {}
};

class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class IncompatibleError : public std::runtime_error {
public:
  explicit IncompatibleError(const std::string& msg) : std::runtime_error(msg) {}
};

// Training aborted on a non-finite loss; carries the offending epoch.
class DivergedError : public std::runtime_error {
public:
  DivergedError(const std::string& msg, std::size_t epoch)
      : std::runtime_error(msg + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const { return epoch_; }

private:
  std::size_t epoch_;
};

}  // namespace dynloc
