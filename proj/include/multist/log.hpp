#pragma once

#include <iostream>
#include <string>

namespace multist::log {

enum class Level { Quiet = 0, Warn = 1, Info = 2 };

inline Level& level() {
  static Level lvl = Level::Warn;
  return lvl;
}

inline void warn(const std::string& msg) {
  if (level() >= Level::Warn) std::clog << "warning: " << msg << '\n';
}

inline void info(const std::string& msg) {
  if (level() >= Level::Info) std::clog << msg << '\n';
}

}  // namespace multist::log
