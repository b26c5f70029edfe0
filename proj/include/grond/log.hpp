#pragma once

#include <atomic>
#include <iostream>
#include <string>

namespace grond::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

inline std::atomic<Level>& threshold() {
  static std::atomic<Level> level{Level::Warn};
  return level;
}

inline void set_level(Level l) { threshold() = l; }

inline void write(Level l, const char* tag, const std::string& msg) {
  if (l < threshold().load()) return;
  std::clog << "[grond " << tag << "] " << msg << '\n';
}

inline void debug(const std::string& m) { write(Level::Debug, "debug", m); }
inline void info(const std::string& m) { write(Level::Info, "info", m); }
inline void warn(const std::string& m) { write(Level::Warn, "warn", m); }

}  // namespace grond::log
