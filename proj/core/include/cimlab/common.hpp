#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace cimlab {

using u64 = std::uint64_t;

/// Base error type for everything the lab can fail on.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

enum class Mode { Train, Eval, Stochastic };

} // namespace cimlab
