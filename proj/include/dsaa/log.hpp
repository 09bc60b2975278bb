#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace dsaa::log {

enum class Level { Debug, Info, Warn, Error };

void set_level(Level level);
void write(Level level, std::string_view msg);
inline void info(std::string_view msg) { write(Level::Info, msg); }
inline void warn(std::string_view msg) { write(Level::Warn, msg); }
inline void error(std::string_view msg) { write(Level::Error, msg); }
inline void debug(std::string_view msg) { write(Level::Debug, msg); }

/// Messages at Warn and above are also kept in memory for run manifests/tests.
std::vector<std::string> recent_warnings();
void clear_recent();

}  // namespace dsaa::log
