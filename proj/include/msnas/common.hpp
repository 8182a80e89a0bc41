#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace msnas {

// Build-wide version tag, embedded in manifests and checkpoints.
inline constexpr const char* kVersionTag = "msnas-0.1.0";

namespace detail {
inline void format_into(std::ostringstream&) {}
template <typename A, typename... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
  os << a;
  format_into(os, rest...);
}
}  // namespace detail

template <typename... Args>
std::string str_cat(const Args&... args) {
  std::ostringstream os;
  detail::format_into(os, args...);
  return os.str();
}

// Invalid caller-supplied values.
template <typename... Args>
void check_arg(bool cond, const Args&... msg) {
  if (!cond) throw std::invalid_argument(str_cat(msg...));
}

// Misuse of an object's lifecycle (e.g. double backward on one tape).
template <typename... Args>
void check_state(bool cond, const Args&... msg) {
  if (!cond) throw std::logic_error(str_cat(msg...));
}

// Internal consistency; firing one of these is a bug, not user error.
template <typename... Args>
void check_internal(bool cond, const Args&... msg) {
  if (!cond) throw std::runtime_error(str_cat("internal invariant violated: ", msg...));
}

}  // namespace msnas
