#pragma once

#include <functional>
#include <string_view>

namespace kohscan::log {

using Sink = std::function<void(std::string_view level, std::string_view message)>;

void info(std::string_view message);
void warn(std::string_view message);

/// Replaces the process-wide sink (default: stderr). Returns the previous one.
Sink set_sink(Sink sink);

/// Suppresses info-level output; warnings still reach the sink.
void set_quiet(bool quiet);

}  // namespace kohscan::log
