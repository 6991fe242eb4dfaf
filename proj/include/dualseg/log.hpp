#pragma once

// Minimal stderr progress log. DUALSEG_QUIET=1 silences info lines.

#include <cstdlib>
#include <iostream>
#include <sstream>

namespace dualseg::log {

inline bool quiet() {
  static const bool q = [] {
    const char* v = std::getenv("DUALSEG_QUIET");
    return v && *v && *v != '0';
  }();
  return q;
}

template <typename... Args>
void write(const char* level, const Args&... args) {
  std::ostringstream os;
  os << '[' << level << "] ";
  (os << ... << args);
  os << '\n';
  std::cerr << os.str();
}

template <typename... Args>
void info(const Args&... args) {
  if (!quiet()) write("info", args...);
}

template <typename... Args>
void warn(const Args&... args) {
  write("warn", args...);
}

}  // namespace dualseg::log
