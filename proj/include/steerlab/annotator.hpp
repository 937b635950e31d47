#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steerlab/external_process.hpp"

namespace steerlab {

struct ThresholdConfig {
  double low = 0.05;
  double high = 0.6;

  void check() const {
    if (!(0.0 <= low && low <= high && high <= 1.0)) {
      throw ValueError("thresholds must satisfy 0 <= low <= high <= 1");
    }
  }
  bool operator==(const ThresholdConfig&) const = default;
};

enum class Outcome { positive, negative, discarded };

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::positive: return "positive";
    case Outcome::negative: return "negative";
    case Outcome::discarded: return "discarded";
  }
  return "discarded";
}

// Strict inequalities on both sides: a score equal to a threshold is discarded.
inline Outcome classify(double score, const ThresholdConfig& cfg) {
  cfg.check();
  if (!(score >= 0.0 && score <= 1.0)) throw ValueError("score " + std::to_string(score) + " outside [0,1]");
  if (score < cfg.low) return Outcome::negative;
  if (score > cfg.high) return Outcome::positive;
  return Outcome::discarded;
}

struct AnnotationOutcome {
  std::int64_t record_id = 0;
  std::optional<double> score;  // absent when the judge failed on this item
  Outcome outcome = Outcome::discarded;
  std::string cause;
};

class Judge {
 public:
  virtual ~Judge() = default;
  // Throws JudgeUnavailable when no request can be served; any other
  // exception is treated as a failure of this item only.
  virtual double score(const Prompt& prompt, const std::string& response) = 0;
};

class OracleJudge : public Judge {
 public:
  explicit OracleJudge(SyntheticConfig cfg) : cfg_(cfg) {}
  double score(const Prompt& prompt, const std::string& response) override {
    return oracle_judge(cfg_, prompt.prompt_id, response);
  }

 private:
  SyntheticConfig cfg_;
};

// → {"cmd":"judge","prompt":…,"response":…}  ← {"score": s}
class ExternalJudge : public Judge {
 public:
  explicit ExternalJudge(const std::string& command, std::chrono::milliseconds timeout = std::chrono::seconds(60))
      : proc_(command), timeout_(timeout) {}

  double score(const Prompt& prompt, const std::string& response) override {
    if (!proc_.output_open()) throw JudgeUnavailable("judge process '" + proc_.command() + "' is not running");
    json req;
    req["cmd"] = "judge";
    req["prompt"] = prompt.text;
    req["response"] = response;
    std::string line;
    try {
      proc_.write_line(req.dump());
      line = proc_.read_line(timeout_);
    } catch (const ProtocolError& e) {
      throw JudgeUnavailable(e.what());
    }
    const auto reply = detail::parse_reply(proc_, line);
    if (!reply.contains("score") || !reply.at("score").is_number()) {
      throw ProtocolError("judge reply on line " + std::to_string(proc_.lines_read()) + " has no numeric score: " + line);
    }
    const double s = reply.at("score").get<double>();
    if (!(s >= 0.0 && s <= 1.0)) {
      throw ProtocolError("judge score " + std::to_string(s) + " on line " + std::to_string(proc_.lines_read()) +
                          " outside [0,1]");
    }
    return s;
  }

 private:
  ChildProcess proc_;
  std::chrono::milliseconds timeout_;
};

struct JudgedItem {
  std::optional<double> score;
  std::string error;
};

// One entry per (prompt, response); a failing item is reported, not thrown.
inline std::vector<JudgedItem> judge_batch(Judge& judge, const std::vector<Prompt>& prompts,
                                           const std::vector<std::string>& responses) {
  if (prompts.size() != responses.size()) {
    throw DimensionError("judge_batch: " + std::to_string(prompts.size()) + " prompts vs " +
                         std::to_string(responses.size()) + " responses");
  }
  std::vector<JudgedItem> out(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    try {
      out[i].score = judge.score(prompts[i], responses[i]);
    } catch (const JudgeUnavailable&) {
      throw;
    } catch (const std::exception& e) {
      out[i].error = e.what();
      log::warn("judge failed on prompt " + std::to_string(prompts[i].prompt_id) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<AnnotationOutcome> make_outcomes(const std::vector<std::int64_t>& record_ids,
                                                    const std::vector<JudgedItem>& items, const ThresholdConfig& cfg) {
  if (record_ids.size() != items.size()) throw DimensionError("make_outcomes: misaligned inputs");
  std::vector<AnnotationOutcome> out;
  out.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    AnnotationOutcome o;
    o.record_id = record_ids[i];
    o.score = items[i].score;
    if (o.score) {
      o.outcome = classify(*o.score, cfg);
    } else {
      o.cause = items[i].error;
    }
    out.push_back(std::move(o));
  }
  return out;
}

// Positives become faithful, negatives faithless, discarded records are dropped.
inline ActivationSet annotate_set(const ActivationSet& set, const std::vector<AnnotationOutcome>& outcomes) {
  std::map<std::int64_t, const AnnotationOutcome*> by_id;
  for (const auto& o : outcomes) by_id[o.record_id] = &o;
  std::map<std::int64_t, bool> seen;
  for (const auto& r : set.records()) seen[r.record_id] = true;
  for (const auto& o : outcomes) {
    if (!seen.count(o.record_id)) throw ValueError("annotate_set: unknown record_id " + std::to_string(o.record_id));
  }
  ActivationSet out(set.num_layers(), set.hidden_dim());
  for (const auto& r : set.records()) {
    const auto it = by_id.find(r.record_id);
    if (it == by_id.end()) throw ValueError("annotate_set: no outcome for record_id " + std::to_string(r.record_id));
    const auto& o = *it->second;
    if (o.outcome == Outcome::discarded) continue;
    ActivationRecord rec = r;
    rec.label = o.outcome == Outcome::positive ? Label::faithful : Label::faithless;
    rec.score = o.score;
    out.add(std::move(rec));
  }
  if (out.empty() && !set.empty()) log::warn("annotate_set: every sample was discarded");
  return out;
}

}  // namespace steerlab
