#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <map>
#include <mutex>
#include <string>
#include <thread>

#include "steerlab/subject_model.hpp"

// Line-delimited JSON over a companion process's stdin/stdout.
namespace steerlab {

class ChildProcess {
 public:
  // Runs `command` through /bin/sh -c. stderr is inherited.
  explicit ChildProcess(const std::string& command) : command_(command) {
    static std::once_flag ignore_sigpipe;
    std::call_once(ignore_sigpipe, [] { ::signal(SIGPIPE, SIG_IGN); });
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw IoError("pipe: " + std::string(std::strerror(errno)));
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw IoError("pipe: " + std::string(std::strerror(errno)));
    }
    pid_ = ::fork();
    if (pid_ < 0) throw IoError("fork: " + std::string(std::strerror(errno)));
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    in_ = to_child[1];
    out_ = from_child[0];
    ::fcntl(in_, F_SETFD, FD_CLOEXEC);
    ::fcntl(out_, F_SETFD, FD_CLOEXEC);
  }

  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  ~ChildProcess() { terminate(); }

  const std::string& command() const { return command_; }
  int lines_read() const { return lines_read_; }
  bool alive() const { return pid_ > 0; }
  bool output_open() const { return out_ >= 0; }

  void write_line(const std::string& line) {
    if (in_ < 0) throw ProtocolError("companion process '" + command_ + "' is not running");
    std::string buf = line + "\n";
    const char* p = buf.data();
    std::size_t left = buf.size();
    while (left > 0) {
      const ssize_t n = ::write(in_, p, left);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError("companion process '" + command_ + "' closed its input (" + std::strerror(errno) + ")");
      }
      p += n;
      left -= static_cast<std::size_t>(n);
    }
  }

  std::string read_line(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        ++lines_read_;
        return line;
      }
      if (out_ < 0) throw ProtocolError("companion process '" + command_ + "' output closed");
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) {
        terminate();
        throw TimeoutError("companion process '" + command_ + "' did not answer within " +
                           std::to_string(timeout.count()) + " ms");
      }
      pollfd pfd{out_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(out_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) {
        ::close(out_);
        out_ = -1;
        continue;
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  void terminate() {
    if (in_ >= 0) ::close(in_);
    if (out_ >= 0) ::close(out_);
    in_ = out_ = -1;
    if (pid_ > 0) {
      int status = 0;
      // Give a well-behaved child a moment to exit on EOF before killing it.
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) {
          pid_ = -1;
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

 private:
  std::string command_;
  pid_t pid_ = -1;
  int in_ = -1;
  int out_ = -1;
  int lines_read_ = 0;
  std::string buffer_;
};

namespace detail {

inline json parse_reply(const ChildProcess& proc, const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception&) {
    throw ProtocolError("malformed reply on line " + std::to_string(proc.lines_read()) + " from '" + proc.command() +
                        "': " + line);
  }
  if (!j.is_object()) {
    throw ProtocolError("reply on line " + std::to_string(proc.lines_read()) + " is not an object: " + line);
  }
  if (j.contains("error")) {
    throw ProtocolError("companion reported an error on line " + std::to_string(proc.lines_read()) + ": " +
                        j.at("error").dump());
  }
  return j;
}

}  // namespace detail

struct Capabilities {
  int num_layers = 0;
  int hidden_dim = 0;
  int format_version = kFormatVersion;
};

class ExternalModel : public SubjectModel {
 public:
  ExternalModel(const std::string& command, fs::path work_dir,
                std::chrono::milliseconds timeout = std::chrono::minutes(10))
      : proc_(command), work_dir_(std::move(work_dir)), timeout_(timeout) {
    io::ensure_directory(work_dir_);
    caps_ = query_capabilities();
  }

  int num_layers() const override { return caps_.num_layers; }
  int hidden_dim() const override { return caps_.hidden_dim; }
  const Capabilities& capabilities() const { return caps_; }

  RunResult run(const PromptSet& prompts, const SteeringPlan* plan, const CaptureSpec& capture,
                int max_tokens) override {
    std::lock_guard lock(mutex_);
    check_plan_shape(plan, caps_.num_layers, caps_.hidden_dim);
    if (capture.role == TokenRole::custom) throw ValueError("the wire protocol has no custom capture role");
    const auto req = work_dir_ / ("request_" + std::to_string(request_++));
    io::ensure_directory(req);
    save_prompts(prompts, req / "prompts.jsonl");
    json cmd;
    cmd["cmd"] = "run";
    cmd["prompts_path"] = (req / "prompts.jsonl").string();
    if (plan) {
      save_steering_plan(*plan, req / "plan");
      cmd["steering_path"] = (req / "plan").string();
    } else {
      cmd["steering_path"] = nullptr;
    }
    cmd["capture"] = to_string(capture.role);
    cmd["max_tokens"] = max_tokens;
    cmd["out_dir"] = (req / "out").string();
    proc_.write_line(cmd.dump());
    const auto reply = detail::parse_reply(proc_, proc_.read_line(timeout_));
    if (!reply.contains("responses_path") || !reply.contains("activations_path") ||
        !reply["responses_path"].is_string() || !reply["activations_path"].is_string()) {
      throw ProtocolError("run reply on line " + std::to_string(proc_.lines_read()) +
                          " lacks responses_path/activations_path: " + reply.dump());
    }

    RunResult out;
    auto set = load_activation_set(reply["activations_path"].get<std::string>());
    if (set.num_layers() != caps_.num_layers || set.hidden_dim() != caps_.hidden_dim) {
      throw ProtocolError("activation shape (" + std::to_string(set.num_layers()) + "," +
                          std::to_string(set.hidden_dim()) + ") differs from declared capabilities");
    }
    if (set.size() != prompts.size()) {
      throw ProtocolError("companion returned " + std::to_string(set.size()) + " records for " +
                          std::to_string(prompts.size()) + " prompts");
    }
    const auto lines = load_responses(reply["responses_path"].get<std::string>(), "prompt_id");
    std::map<std::int64_t, std::string> by_prompt;
    for (const auto& l : lines) by_prompt[l.id] = l.text;
    std::map<std::int64_t, const ActivationRecord*> rec_by_prompt;
    for (const auto& r : set.records()) rec_by_prompt[r.prompt_id] = &r;

    out.activations = ActivationSet(set.num_layers(), set.hidden_dim());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const auto id = prompts[i].prompt_id;
      const auto resp = by_prompt.find(id);
      const auto rec = rec_by_prompt.find(id);
      if (resp == by_prompt.end() || rec == rec_by_prompt.end()) {
        throw ProtocolError("companion output is missing prompt " + std::to_string(id));
      }
      out.responses.push_back(resp->second);
      ActivationRecord r = *rec->second;
      r.record_id = static_cast<std::int64_t>(i);
      r.label = Label::unlabeled;
      r.score.reset();
      r.source_iteration = 0;
      out.activations.add(std::move(r));
    }
    return out;
  }

 private:
  Capabilities query_capabilities() {
    proc_.write_line(R"({"cmd":"capabilities"})");
    const auto reply = detail::parse_reply(proc_, proc_.read_line(timeout_));
    try {
      Capabilities c;
      c.hidden_dim = reply.at("hidden_dim").get<int>();
      c.num_layers = reply.at("num_layers").get<int>();
      c.format_version = reply.value("format_version", kFormatVersion);
      if (c.format_version != kFormatVersion) {
        throw ProtocolError("companion speaks format_version " + std::to_string(c.format_version));
      }
      if (c.hidden_dim < 1 || c.num_layers < 1) throw ProtocolError("companion declared an empty shape");
      return c;
    } catch (const json::exception& e) {
      throw ProtocolError("capabilities reply on line " + std::to_string(proc_.lines_read()) + ": " + e.what());
    }
  }

  ChildProcess proc_;
  fs::path work_dir_;
  std::chrono::milliseconds timeout_;
  Capabilities caps_;
  std::mutex mutex_;
  int request_ = 0;
};

}  // namespace steerlab
