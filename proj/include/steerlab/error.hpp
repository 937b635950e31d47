#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>

namespace steerlab {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Malformed or unsupported file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Precondition on values (empty class, zero norm, out-of-range score, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public ProtocolError {
 public:
  using ProtocolError::ProtocolError;
};

// A judge that cannot serve any request. Per-item judge failures are not this.
class JudgeUnavailable : public Error {
 public:
  using Error::Error;
};

// Warnings go through a process-wide sink so tests and the CLI can capture them.
namespace log {

using Sink = std::function<void(const std::string&)>;

namespace detail {
inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}
inline Sink& sink() {
  static Sink s = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return s;
}
}  // namespace detail

inline Sink set_sink(Sink sink) {
  std::lock_guard lock(detail::sink_mutex());
  return std::exchange(detail::sink(), std::move(sink));
}

inline void warn(const std::string& msg) {
  std::lock_guard lock(detail::sink_mutex());
  if (detail::sink()) detail::sink()(msg);
}

// Restores the previous sink on destruction.
class ScopedSink {
 public:
  explicit ScopedSink(Sink sink) : previous_(set_sink(std::move(sink))) {}
  ~ScopedSink() { set_sink(std::move(previous_)); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace log
}  // namespace steerlab
