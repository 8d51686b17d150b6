#include "kohscan/util/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace kohscan::log {
namespace {

std::mutex& sink_mutex() {
    static std::mutex m;
    return m;
}

Sink& current_sink() {
    static Sink sink = [](std::string_view level, std::string_view message) {
        std::cerr << "[" << level << "] " << message << '\n';
    };
    return sink;
}

std::atomic<bool> quiet_flag{false};

void emit(std::string_view level, std::string_view message) {
    std::lock_guard lock(sink_mutex());
    if (current_sink()) current_sink()(level, message);
}

}  // namespace

void info(std::string_view message) {
    if (!quiet_flag.load()) emit("info", message);
}

void warn(std::string_view message) { emit("warn", message); }

Sink set_sink(Sink sink) {
    std::lock_guard lock(sink_mutex());
    std::swap(sink, current_sink());
    return sink;
}

void set_quiet(bool quiet) { quiet_flag.store(quiet); }

}  // namespace kohscan::log
