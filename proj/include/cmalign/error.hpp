#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace cmalign {

// Error taxonomy shared by the library and the CLI exit-code mapping.
enum class ErrorKind {
  config,     // bad configuration value or missing required key
  io,         // filesystem / format failures
  dimension,  // incompatible tensor shapes
  numeric,    // non-finite value where a finite one is required
  usage,      // API misuse (non-scalar backward root, bad index, ...)
  data,       // dataset inconsistency (manifest vs files, missing modality)
  pairing,    // positive pair with mismatched identity labels
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string what) : std::runtime_error(std::move(what)), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {

inline void concat_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void concat_into(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  concat_into(os, rest...);
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void raise(ErrorKind kind, const Args&... args) {
  std::ostringstream os;
  detail::concat_into(os, args...);
  throw Error(kind, os.str());
}

template <typename... Args>
void require(bool cond, ErrorKind kind, const Args&... args) {
  if (!cond) raise(kind, args...);
}

}  // namespace cmalign
